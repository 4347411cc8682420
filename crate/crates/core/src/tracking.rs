//! Constant-velocity Kalman tracks with greedy IOU association.
//!
//! Boxes live in Cartesian pixels. The state is `(cx, cy, w, h, vx, vy)`:
//! centre, size and centre velocity in pixels per frame. Size is modelled as
//! a slow random walk.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;

type State = SVector<f64, 6>;
type Cov = SMatrix<f64, 6, 6>;
type Obs = SVector<f64, 4>;
type ObsMat = SMatrix<f64, 4, 6>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrackError {
    #[error("detection box must have positive finite size, got {0:?}")]
    InvalidDetection(BBox),
    #[error("invalid tracker config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// Matches required before a track's prediction replaces its detection;
    /// predictions are used once `age > min_age`.
    pub min_age: u32,
    /// Unmatched frames tolerated before a track is deleted.
    pub max_age: u32,
    pub process_noise_velocity: f64,
    pub process_noise_size: f64,
    pub measurement_noise: f64,
    /// Initial velocity variance; large, since one box says nothing about motion.
    pub initial_velocity_variance: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            min_age: 3,
            max_age: 5,
            process_noise_velocity: 1e-2,
            process_noise_size: 1e-4,
            measurement_noise: 1.0,
            initial_velocity_variance: 1e4,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackError> {
        if self.min_age < 1 || self.max_age < 1 {
            return Err(TrackError::InvalidConfig("min_age and max_age must be >= 1".into()));
        }
        let noises = [
            self.process_noise_velocity,
            self.process_noise_size,
            self.initial_velocity_variance,
        ];
        if noises.iter().any(|v| !(v.is_finite() && *v >= 0.0))
            || !(self.measurement_noise.is_finite() && self.measurement_noise > 0.0)
        {
            return Err(TrackError::InvalidConfig("noise scales must be finite and non-negative".into()));
        }
        Ok(())
    }
}

fn transition() -> Cov {
    let mut f = Cov::identity();
    f[(0, 4)] = 1.0;
    f[(1, 5)] = 1.0;
    f
}

fn observation() -> ObsMat {
    let mut h = ObsMat::zeros();
    for i in 0..4 {
        h[(i, i)] = 1.0;
    }
    h
}

fn state_bbox(x: &State) -> BBox {
    BBox::from_center(x[0], x[1], x[2], x[3])
}

const MIN_SIZE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: u64,
    state: State,
    cov: Cov,
    /// Matched detections since the track was created.
    pub age: u32,
    pub time_since_update: u32,
}

impl Track {
    pub fn new(id: u64, bbox: &BBox, cfg: &TrackerConfig) -> Result<Self, TrackError> {
        if !bbox.is_valid() {
            return Err(TrackError::InvalidDetection(*bbox));
        }
        let (cx, cy) = bbox.center();
        let state = State::from_column_slice(&[cx, cy, bbox.w, bbox.h, 0.0, 0.0]);
        let r = cfg.measurement_noise;
        let v = cfg.initial_velocity_variance;
        let cov = Cov::from_diagonal(&State::from_column_slice(&[r, r, r, r, v, v]));
        Ok(Self {
            id,
            state,
            cov,
            age: 0,
            time_since_update: 0,
        })
    }

    /// Builds a track from an explicit state; covariance as for a fresh track.
    pub fn from_state(id: u64, state: [f64; 6], cfg: &TrackerConfig) -> Result<Self, TrackError> {
        let mut t = Self::new(id, &BBox::from_center(state[0], state[1], state[2], state[3]), cfg)?;
        t.state = State::from_column_slice(&state);
        Ok(t)
    }

    pub fn state(&self) -> [f64; 6] {
        let mut out = [0.0; 6];
        out.copy_from_slice(self.state.as_slice());
        out
    }

    pub fn covariance_trace(&self) -> f64 {
        self.cov.trace()
    }

    pub fn bbox(&self) -> BBox {
        state_bbox(&self.state)
    }

    /// Box one frame ahead, without changing the track.
    pub fn lookahead(&self) -> BBox {
        state_bbox(&(transition() * self.state))
    }

    /// Advances the track one frame and returns the predicted box.
    pub fn predict(&mut self, cfg: &TrackerConfig) -> BBox {
        let f = transition();
        self.state = f * self.state;
        let q = Cov::from_diagonal(&State::from_column_slice(&[
            0.0,
            0.0,
            cfg.process_noise_size,
            cfg.process_noise_size,
            cfg.process_noise_velocity,
            cfg.process_noise_velocity,
        ]));
        self.cov = f * self.cov * f.transpose() + q;
        self.bbox()
    }

    /// Kalman measurement update with a matched detection.
    pub fn update(&mut self, det: &BBox, cfg: &TrackerConfig) -> Result<(), TrackError> {
        if !det.is_valid() {
            return Err(TrackError::InvalidDetection(*det));
        }
        let (cx, cy) = det.center();
        let z = Obs::new(cx, cy, det.w, det.h);
        let h = observation();
        let r = SMatrix::<f64, 4, 4>::identity() * cfg.measurement_noise;
        let innovation = z - h * self.state;
        let s = h * self.cov * h.transpose() + r;
        let s_inv = s
            .try_inverse()
            .expect("innovation covariance is positive definite");
        let k = self.cov * h.transpose() * s_inv;
        self.state += k * innovation;
        // Joseph form keeps the covariance symmetric positive definite.
        let ikh = Cov::identity() - k * h;
        let cov = ikh * self.cov * ikh.transpose() + k * r * k.transpose();
        self.cov = (cov + cov.transpose()) * 0.5;
        self.state[2] = self.state[2].max(MIN_SIZE);
        self.state[3] = self.state[3].max(MIN_SIZE);
        self.age += 1;
        self.time_since_update = 0;
        Ok(())
    }

    pub fn snapshot(&self) -> TrackSnapshot {
        let s = self.state;
        TrackSnapshot {
            id: self.id,
            cx: s[0],
            cy: s[1],
            w: s[2],
            h: s[3],
            vx: s[4],
            vy: s[5],
            age: self.age,
            time_since_update: self.time_since_update,
        }
    }
}

/// Serializable view of a track.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackSnapshot {
    pub id: u64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub vx: f64,
    pub vy: f64,
    pub age: u32,
    pub time_since_update: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Association {
    /// `(prediction index, detection index, iou)`.
    pub matches: Vec<(usize, usize, f64)>,
    pub unmatched_predictions: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Greedy matching by descending IOU; a pair matches iff IOU > 0. Equal IOUs
/// go to the lower prediction index, then the lower detection index.
pub fn associate(predictions: &[BBox], detections: &[BBox]) -> Association {
    let mut pairs = Vec::new();
    for (i, p) in predictions.iter().enumerate() {
        for (j, d) in detections.iter().enumerate() {
            let iou = p.iou(d);
            if iou > 0.0 {
                pairs.push((i, j, iou));
            }
        }
    }
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut used_p = vec![false; predictions.len()];
    let mut used_d = vec![false; detections.len()];
    let mut matches = Vec::new();
    for (i, j, iou) in pairs {
        if !used_p[i] && !used_d[j] {
            used_p[i] = true;
            used_d[j] = true;
            matches.push((i, j, iou));
        }
    }
    Association {
        matches,
        unmatched_predictions: (0..predictions.len()).filter(|&i| !used_p[i]).collect(),
        unmatched_detections: (0..detections.len()).filter(|&j| !used_d[j]).collect(),
    }
}

/// Multi-object tracker for one stream.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: TrackerConfig,
    tracks: Vec<Track>,
    next_id: u64,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig) -> Result<Self, TrackError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            tracks: Vec::new(),
            next_id: 0,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    fn spawn(&mut self, bbox: &BBox) -> Result<(), TrackError> {
        let t = Track::new(self.next_id, bbox, &self.cfg)?;
        self.next_id += 1;
        self.tracks.push(t);
        Ok(())
    }

    /// Processes one frame of detections and returns the boxes to prioritise
    /// in the next frame.
    ///
    /// After an anchor frame every track is rebuilt from `detections` and the
    /// detections are returned unchanged. Otherwise tracks are predicted,
    /// matched and updated. A track older than `min_age` contributes its
    /// one-frame-ahead prediction, also while coasting without a match;
    /// younger tracks contribute their detection. Invalid detections are
    /// skipped.
    pub fn step(&mut self, detections: &[BBox], post_anchor: bool) -> Vec<BBox> {
        let detections: Vec<BBox> = detections.iter().copied().filter(BBox::is_valid).collect();
        if post_anchor {
            self.tracks.clear();
            for d in &detections {
                self.spawn(d).expect("detections were validated");
            }
            return detections;
        }

        let cfg = self.cfg;
        let predictions: Vec<BBox> = self.tracks.iter_mut().map(|t| t.predict(&cfg)).collect();
        let assoc = associate(&predictions, &detections);

        let mut outputs: Vec<(u64, BBox)> = Vec::new();
        for &(ti, di, _) in &assoc.matches {
            let track = &mut self.tracks[ti];
            track.update(&detections[di], &cfg).expect("detections were validated");
            let out = if track.age > cfg.min_age { track.lookahead() } else { detections[di] };
            outputs.push((track.id, out));
        }
        for &ti in &assoc.unmatched_predictions {
            let track = &mut self.tracks[ti];
            track.time_since_update += 1;
            if track.time_since_update <= cfg.max_age && track.age > cfg.min_age {
                outputs.push((track.id, track.lookahead()));
            }
        }
        self.tracks.retain(|t| t.time_since_update <= cfg.max_age);
        for &di in &assoc.unmatched_detections {
            let id = self.next_id;
            self.spawn(&detections[di]).expect("detections were validated");
            outputs.push((id, detections[di]));
        }
        outputs.sort_by_key(|(id, _)| *id);
        outputs.into_iter().map(|(_, b)| b).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> TrackerConfig {
        TrackerConfig::default()
    }

    #[test]
    fn predict_moves_centre_and_grows_covariance() {
        let mut t = Track::from_state(0, [10.0, 10.0, 4.0, 4.0, 2.0, 0.0], &cfg()).unwrap();
        let before = t.covariance_trace();
        let b = t.predict(&cfg());
        assert_eq!(b.center(), (12.0, 10.0));
        assert_eq!((b.w, b.h), (4.0, 4.0));
        assert!(t.covariance_trace() > before);

        let mut still = Track::from_state(1, [5.0, 6.0, 2.0, 3.0, 0.0, 0.0], &cfg()).unwrap();
        let b0 = still.bbox();
        assert_eq!(still.predict(&cfg()), b0);
    }

    #[test]
    fn update_with_prediction_keeps_mean_and_shrinks_covariance() {
        let mut t = Track::from_state(0, [10.0, 10.0, 4.0, 4.0, 1.0, 0.0], &cfg()).unwrap();
        let p = t.predict(&cfg());
        let mean = t.state();
        let tr = t.covariance_trace();
        t.time_since_update = 3;
        t.update(&p, &cfg()).unwrap();
        for (a, b) in t.state().iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(t.covariance_trace() < tr);
        assert_eq!(t.time_since_update, 0);
        assert_eq!(t.age, 1);
    }

    #[test]
    fn repeated_updates_converge() {
        // Scalar oracle: with prior variance P0 = R, k updates against a fixed
        // measurement z leave the estimate at z + e0 / (k + 1).
        let c = cfg();
        let mut t = Track::new(0, &BBox::from_center(0.0, 0.0, 4.0, 4.0), &c).unwrap();
        let target = BBox::from_center(1.0, -1.0, 4.0, 4.0);
        for k in 1..=10 {
            t.update(&target, &c).unwrap();
            let (cx, cy) = t.bbox().center();
            let oracle = 1.0 - 1.0 / (k as f64 + 1.0);
            assert!((cx - oracle).abs() < 1e-9 && (cy + oracle).abs() < 1e-9, "k={k}: {cx}");
        }
        let (cx, cy) = t.bbox().center();
        assert!((cx - 1.0).abs() < 0.1 && (cy + 1.0).abs() < 0.1);
    }

    #[test]
    fn invalid_detection_rejected() {
        let mut t = Track::new(0, &BBox::new(0.0, 0.0, 1.0, 1.0), &cfg()).unwrap();
        assert!(t.update(&BBox::new(0.0, 0.0, 0.0, 1.0), &cfg()).is_err());
        assert!(Track::new(1, &BBox::new(0.0, 0.0, -1.0, 1.0), &cfg()).is_err());
    }

    #[test]
    fn association_examples() {
        let a = BBox::new(0.0, 0.0, 4.0, 4.0);
        let r = associate(&[a], &[a]);
        assert_eq!(r.matches, vec![(0, 0, 1.0)]);

        let r = associate(&[a], &[BBox::new(10.0, 10.0, 1.0, 1.0)]);
        assert!(r.matches.is_empty());
        assert_eq!((r.unmatched_predictions, r.unmatched_detections), (vec![0], vec![0]));

        // detection overlaps both predictions, more so the second
        let p1 = BBox::new(0.0, 0.0, 4.0, 4.0);
        let p2 = BBox::new(3.0, 0.0, 4.0, 4.0);
        let d = BBox::new(4.0, 0.0, 4.0, 4.0);
        let r = associate(&[p1, p2], &[d]);
        assert_eq!(r.matches.len(), 1);
        assert_eq!(r.matches[0].0, 1);
        assert_eq!(r.unmatched_predictions, vec![0]);
    }

    #[test]
    fn equal_iou_goes_to_lower_track() {
        let d = BBox::new(2.0, 0.0, 4.0, 4.0);
        let p1 = BBox::new(0.0, 0.0, 4.0, 4.0);
        let p2 = BBox::new(4.0, 0.0, 4.0, 4.0);
        let r = associate(&[p1, p2], &[d]);
        assert_eq!(r.matches[0].0, 0);
    }

    #[test]
    fn post_anchor_reinitialises() {
        let mut tr = Tracker::new(cfg()).unwrap();
        let dets: Vec<BBox> = (0..5).map(|i| BBox::new(i as f64 * 10.0, 0.0, 3.0, 3.0)).collect();
        assert_eq!(tr.step(&dets, true), dets);
        assert_eq!(tr.tracks().len(), 5);
        assert!(tr.tracks().iter().all(|t| t.age == 0));
    }

    #[test]
    fn constant_velocity_switches_to_prediction() {
        let mut tr = Tracker::new(cfg()).unwrap();
        let at = |k: usize| BBox::from_center(50.0 + 1.5 * k as f64, 40.0 - 0.5 * k as f64, 6.0, 4.0);
        tr.step(&[at(0)], true);
        for k in 1..=8 {
            let out = tr.step(&[at(k)], false);
            assert_eq!(out.len(), 1);
            let age = tr.tracks()[0].age;
            if age > cfg().min_age {
                let (cx, cy) = out[0].center();
                let (gx, gy) = at(k + 1).center();
                assert!(((cx - gx).powi(2) + (cy - gy).powi(2)).sqrt() < 1.0, "k={k}");
            } else {
                assert_eq!(out[0], at(k));
            }
        }
        assert_eq!(tr.tracks()[0].age, 8);
    }

    #[test]
    fn tracks_age_out() {
        let mut tr = Tracker::new(cfg()).unwrap();
        tr.step(&[BBox::new(0.0, 0.0, 2.0, 2.0)], true);
        for _ in 0..cfg().max_age {
            tr.step(&[], false);
            assert_eq!(tr.tracks().len(), 1);
        }
        assert!(tr.step(&[], false).is_empty());
        assert!(tr.tracks().is_empty());
    }

    proptest! {
        #[test]
        fn prediction_error_non_increasing(vx in -3.0f64..3.0, vy in -3.0f64..3.0, x0 in 20.0f64..200.0) {
            let mut tr = Tracker::new(cfg()).unwrap();
            let at = |k: usize| BBox::from_center(x0 + vx * k as f64, 100.0 + vy * k as f64, 8.0, 8.0);
            tr.step(&[at(0)], true);
            let mut last = f64::INFINITY;
            for k in 1..12 {
                tr.step(&[at(k)], false);
                let (cx, cy) = tr.tracks()[0].lookahead().center();
                let (gx, gy) = at(k + 1).center();
                let err = ((cx - gx).powi(2) + (cy - gy).powi(2)).sqrt();
                prop_assert!(err <= last + 1e-9, "k={} err={} last={}", k, err, last);
                last = err;
            }
        }

        #[test]
        fn track_count_bounded(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut tr = Tracker::new(cfg()).unwrap();
            let first: Vec<BBox> = (0..rng.gen_range(0..4))
                .map(|_| BBox::new(rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0), 5.0, 5.0))
                .collect();
            tr.step(&first, true);
            let mut bound = first.len();
            let mut seen = std::collections::BTreeSet::new();
            for _ in 0..10 {
                let dets: Vec<BBox> = (0..rng.gen_range(0..4))
                    .map(|_| BBox::new(rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0), 5.0, 5.0))
                    .collect();
                bound += dets.len();
                let alive: Vec<u64> = tr.tracks().iter().map(|t| t.id).collect();
                tr.step(&dets, false);
                prop_assert!(tr.tracks().len() <= bound);
                for t in tr.tracks() {
                    // a deleted id never comes back
                    prop_assert!(!seen.contains(&t.id));
                }
                for id in alive {
                    if !tr.tracks().iter().any(|t| t.id == id) {
                        seen.insert(id);
                    }
                }
            }
        }
    }
}
