//! Synthetic radar sequences with ground truth.
//!
//! Targets move linearly in a Cartesian frame centred on the vehicle (east,
//! north in meters) and are drawn as Gaussian blobs into the polar grid over
//! exponential clutter. A target lying inside the angular shadow of a nearer
//! target is attenuated. Ground-truth boxes live in the Cartesian rendering
//! used by the detectors.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::Detection;
use crate::geometry::{
    normalize_azimuth, BBox, BlockGrid, BlockIndex, CameraCalibration, CartesianGeometry, GeometryError, RadarFrame,
};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene field `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> SceneError {
    SceneError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    /// Initial `(east, north)` position in meters.
    pub position: [f64; 2],
    /// Displacement per frame in meters.
    pub velocity: [f64; 2],
    /// Peak intensity added to the clutter.
    pub reflectivity: f64,
    /// Side of the square footprint in meters; the blob has `sigma = extent / 4`.
    pub extent: f64,
}

impl TargetSpec {
    pub fn position_at(&self, k: usize) -> (f64, f64) {
        (
            self.position[0] + k as f64 * self.velocity[0],
            self.position[1] + k as f64 * self.velocity[1],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub n_frames: usize,
    /// Azimuth bins covering 360 degrees.
    pub rows: usize,
    /// Range bins.
    pub cols: usize,
    pub range_res: f64,
    pub peak_value: f64,
    pub targets: Vec<TargetSpec>,
    /// Mean of the exponential clutter.
    pub clutter_mean: f64,
    /// Factor applied to a target inside a nearer target's shadow.
    pub shadow_attenuation: f64,
    pub cartesian: CartesianGeometry,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_frames: 40,
            rows: 200,
            cols: 288,
            range_res: 0.35,
            peak_value: 255.0,
            targets: Vec::new(),
            clutter_mean: 6.0,
            shadow_attenuation: 0.5,
            cartesian: CartesianGeometry {
                side_px: 256,
                meters_per_pixel: 0.5,
            },
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn max_range(&self) -> f64 {
        self.cols as f64 * self.range_res
    }

    /// A few vehicles in crossing and radial motion, placed from `seed`.
    pub fn traffic(seed: u64, n_frames: usize, n_targets: usize) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_6473);
        let targets = (0..n_targets)
            .map(|_| {
                let range = rng.gen_range(12.0..50.0);
                let az = rng.gen_range(0.0..360.0f64).to_radians();
                let speed = rng.gen_range(0.1..0.6);
                let heading = rng.gen_range(0.0..360.0f64).to_radians();
                TargetSpec {
                    position: [range * az.sin(), range * az.cos()],
                    velocity: [speed * heading.sin(), speed * heading.cos()],
                    reflectivity: rng.gen_range(150.0..240.0),
                    extent: rng.gen_range(3.0..5.0),
                }
            })
            .collect();
        Self {
            n_frames,
            targets,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.n_frames == 0 {
            return Err(invalid("n_frames", "must be at least 1"));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(invalid("rows/cols", "frame must be non-empty"));
        }
        if !(self.range_res > 0.0 && self.range_res.is_finite()) {
            return Err(invalid("range_res", "must be positive"));
        }
        if !(self.peak_value > 0.0 && self.peak_value.is_finite()) {
            return Err(invalid("peak_value", "must be positive"));
        }
        if !(self.clutter_mean >= 0.0 && self.clutter_mean.is_finite()) {
            return Err(invalid("clutter_mean", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.shadow_attenuation) {
            return Err(invalid("shadow_attenuation", "must lie in [0, 1]"));
        }
        CartesianGeometry::new(self.cartesian.side_px, self.cartesian.meters_per_pixel)?;
        for (i, t) in self.targets.iter().enumerate() {
            if !(t.extent > 0.0 && t.extent.is_finite()) {
                return Err(invalid(format!("targets[{i}].extent"), "must be positive"));
            }
            if !(t.reflectivity >= 0.0 && t.reflectivity.is_finite()) {
                return Err(invalid(format!("targets[{i}].reflectivity"), "must be non-negative"));
            }
            let visible = (0..self.n_frames).any(|k| {
                let (e, n) = t.position_at(k);
                e.hypot(n) < self.max_range()
            });
            if !visible {
                return Err(invalid(
                    format!("targets[{i}]"),
                    "never inside the radar range",
                ));
            }
        }
        Ok(())
    }
}

/// Ground truth of one target in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetTruth {
    pub id: usize,
    pub east: f64,
    pub north: f64,
    pub range_m: f64,
    pub azimuth_deg: f64,
    /// Block containing the target centre; `None` beyond the radar range.
    pub block: Option<BlockIndex>,
    /// Blocks where the target adds at least a tenth of its peak.
    pub footprint: BTreeSet<BlockIndex>,
    /// Cartesian box clipped to the rendering; `None` when outside it.
    pub bbox: Option<BBox>,
    pub shadowed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub frame: u32,
    pub targets: Vec<TargetTruth>,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub config: SceneConfig,
    /// Frames numbered from 1.
    pub frames: Vec<RadarFrame>,
    pub truth: Vec<FrameTruth>,
}

impl Scene {
    /// Ground-truth boxes of all frames in detection form.
    pub fn gt_detections(&self) -> Vec<Detection> {
        self.truth
            .iter()
            .flat_map(|f| {
                f.targets
                    .iter()
                    .filter_map(move |t| t.bbox.map(|b| Detection::new(f.frame, b, None)))
            })
            .collect()
    }

    /// What a forward camera with calibration `cam` would report: one
    /// `vehicle` box per target inside its field of view, placed by the same
    /// affine azimuth mapping the allocator inverts. Boxes are centred on
    /// image row 360 and shrink with range.
    pub fn camera_detections(&self, cam: &CameraCalibration) -> Vec<Detection> {
        let span = cam.theta_max - cam.theta_min;
        let px_per_deg = (cam.x_max - cam.x_min) / span;
        let mut out = Vec::new();
        for f in &self.truth {
            for t in &f.targets {
                if t.range_m >= self.config.max_range() || t.range_m <= 0.0 {
                    continue;
                }
                let az = if t.azimuth_deg > 180.0 { t.azimuth_deg - 360.0 } else { t.azimuth_deg };
                if az < cam.theta_min || az > cam.theta_max {
                    continue;
                }
                let extent = self.config.targets[t.id].extent;
                let width = (2.0 * half_angle(extent, t.range_m) * px_per_deg).max(1.0);
                let height = (2000.0 / t.range_m).clamp(4.0, 400.0);
                let cx = cam.x_min + (az - cam.theta_min) * px_per_deg;
                out.push(Detection::new(f.frame, BBox::from_center(cx, 360.0, width, height), Some(0.9)));
            }
        }
        out
    }

    /// Union of target footprints in frame `k` (0-based position).
    pub fn target_blocks(&self, k: usize) -> BTreeSet<BlockIndex> {
        self.truth[k]
            .targets
            .iter()
            .flat_map(|t| t.footprint.iter().copied())
            .collect()
    }
}

fn polar_of(east: f64, north: f64) -> (f64, f64) {
    let range = east.hypot(north);
    let az = if range == 0.0 {
        0.0
    } else {
        normalize_azimuth(east.atan2(north).to_degrees())
    };
    (az, range)
}

/// Half of the angle a target subtends, in degrees.
fn half_angle(extent: f64, range: f64) -> f64 {
    if range <= extent / 2.0 {
        180.0
    } else {
        (extent / 2.0 / range).atan().to_degrees()
    }
}

fn angle_gap(a: f64, b: f64) -> f64 {
    let d = normalize_azimuth(a - b);
    d.min(360.0 - d)
}

/// Indices of targets attenuated by a nearer target's shadow.
fn shadowed(positions: &[(f64, f64)], specs: &[TargetSpec]) -> Vec<bool> {
    let polar: Vec<(f64, f64)> = positions.iter().map(|&(e, n)| polar_of(e, n)).collect();
    (0..polar.len())
        .map(|b| {
            (0..polar.len()).any(|a| {
                a != b
                    && polar[a].1 < polar[b].1
                    && angle_gap(polar[a].0, polar[b].0) < half_angle(specs[a].extent, polar[a].1)
            })
        })
        .collect()
}

/// Renders the sequence. Deterministic for a given config.
pub fn gen_scene(cfg: &SceneConfig, grid: &BlockGrid) -> Result<Scene, SceneError> {
    cfg.validate()?;
    if grid.rows() != cfg.rows || grid.cols() != cfg.cols {
        return Err(invalid(
            "grid",
            format!("grid covers {}x{}, scene is {}x{}", grid.rows(), grid.cols(), cfg.rows, cfg.cols),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let az_res = 360.0 / cfg.rows as f64;
    // cell centre coordinates
    let (sin_t, cos_t): (Vec<f64>, Vec<f64>) = (0..cfg.rows)
        .map(|r| ((r as f64 + 0.5) * az_res).to_radians().sin_cos())
        .unzip();
    let ranges: Vec<f64> = (0..cfg.cols).map(|c| (c as f64 + 0.5) * cfg.range_res).collect();

    let mut frames = Vec::with_capacity(cfg.n_frames);
    let mut truth = Vec::with_capacity(cfg.n_frames);
    for k in 0..cfg.n_frames {
        let frame_index = (k + 1) as u32;
        let positions: Vec<(f64, f64)> = cfg.targets.iter().map(|t| t.position_at(k)).collect();
        let shadow = shadowed(&positions, &cfg.targets);
        let mut data = Array2::from_shape_simple_fn((cfg.rows, cfg.cols), || {
            cfg.clutter_mean * Distribution::<f64>::sample(&Exp1, &mut rng)
        });
        let mut targets = Vec::with_capacity(cfg.targets.len());
        for (id, (t, &(east, north))) in cfg.targets.iter().zip(&positions).enumerate() {
            let gain = t.reflectivity * if shadow[id] { cfg.shadow_attenuation } else { 1.0 };
            let sigma = t.extent / 4.0;
            let reach = 4.0 * sigma;
            let (az, range) = polar_of(east, north);
            let mut footprint = BTreeSet::new();
            let c_lo = (((range - reach) / cfg.range_res).floor().max(0.0)) as usize;
            let c_hi = (((range + reach) / cfg.range_res).ceil() as usize).min(cfg.cols);
            for r in 0..cfg.rows {
                for c in c_lo..c_hi {
                    let de = ranges[c] * sin_t[r] - east;
                    let dn = ranges[c] * cos_t[r] - north;
                    let d2 = de * de + dn * dn;
                    if d2 > reach * reach {
                        continue;
                    }
                    let g = (-d2 / (2.0 * sigma * sigma)).exp();
                    data[[r, c]] += gain * g;
                    if g >= 0.1 {
                        footprint.insert(BlockIndex::new(r / grid.block_rows, c / grid.block_cols));
                    }
                }
            }
            let block = grid.block_at(az, range).ok();
            let (px, py) = cfg.cartesian.from_metric(east, north);
            let side = t.extent / cfg.cartesian.meters_per_pixel;
            let bbox = if range < cfg.max_range() {
                BBox::from_center(px, py, side, side).clipped(&cfg.cartesian.bounds())
            } else {
                None
            };
            targets.push(TargetTruth {
                id,
                east,
                north,
                range_m: range,
                azimuth_deg: az,
                block,
                footprint,
                bbox,
                shadowed: shadow[id],
            });
        }
        data.mapv_inplace(|v| v.clamp(0.0, cfg.peak_value));
        frames.push(RadarFrame::new(data, cfg.range_res, cfg.peak_value, frame_index)?);
        truth.push(FrameTruth {
            frame: frame_index,
            targets,
        });
    }
    Ok(Scene {
        config: cfg.clone(),
        frames,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> BlockGrid {
        BlockGrid::new(200, 288, 10, 24, 1.8, 0.35).unwrap()
    }

    fn target(position: [f64; 2], velocity: [f64; 2]) -> TargetSpec {
        TargetSpec {
            position,
            velocity,
            reflectivity: 200.0,
            extent: 4.0,
        }
    }

    #[test]
    fn empty_scene_is_clutter_only() {
        let cfg = SceneConfig {
            n_frames: 3,
            ..SceneConfig::default()
        };
        let s = gen_scene(&cfg, &grid()).unwrap();
        assert_eq!(s.frames.len(), 3);
        assert!(s.gt_detections().is_empty());
        let mean = s.frames[0].data().mean().unwrap();
        assert!((mean - cfg.clutter_mean).abs() < 0.2, "{mean}");
        assert_eq!(s.frames[2].frame_index(), 3);
    }

    #[test]
    fn static_target_keeps_its_box() {
        let cfg = SceneConfig {
            n_frames: 5,
            targets: vec![target([10.0, 20.0], [0.0, 0.0])],
            ..SceneConfig::default()
        };
        let s = gen_scene(&cfg, &grid()).unwrap();
        let gt = s.gt_detections();
        assert_eq!(gt.len(), 5);
        assert!(gt.windows(2).all(|w| w[0].bbox == w[1].bbox));
        assert_eq!(gt[0].bbox, BBox::from_center(148.0, 88.0, 8.0, 8.0));
    }

    #[test]
    fn radial_motion_advances_range_blocks() {
        let start = 2.0 * 8.4 + 1e-6;
        let v = 0.65;
        let cfg = SceneConfig {
            n_frames: 40,
            targets: vec![target([0.0, start], [0.0, v])],
            ..SceneConfig::default()
        };
        let s = gen_scene(&cfg, &grid()).unwrap();
        let b0 = s.truth[0].targets[0].block.unwrap();
        assert_eq!(b0, BlockIndex::new(0, 2));
        for k in 0..40 {
            let b = s.truth[k].targets[0].block.unwrap();
            assert_eq!(b.rng - b0.rng, (k as f64 * v / 8.4).floor() as usize, "frame {k}");
        }
    }

    #[test]
    fn target_peak_lands_in_its_block() {
        let cfg = SceneConfig {
            n_frames: 1,
            clutter_mean: 0.0,
            targets: vec![target([-15.0, -25.0], [0.0, 0.0])],
            ..SceneConfig::default()
        };
        let s = gen_scene(&cfg, &grid()).unwrap();
        let f = &s.frames[0];
        let ((r, c), _) = f
            .data()
            .indexed_iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        let t = &s.truth[0].targets[0];
        assert_eq!(BlockIndex::new(r / 10, c / 24), t.block.unwrap());
        assert!(t.footprint.contains(&t.block.unwrap()));
    }

    #[test]
    fn farther_target_in_shadow_is_attenuated() {
        let cfg = SceneConfig {
            n_frames: 1,
            clutter_mean: 0.0,
            targets: vec![target([0.0, 20.0], [0.0, 0.0]), target([0.0, 28.4], [0.0, 0.0])],
            ..SceneConfig::default()
        };
        let s = gen_scene(&cfg, &grid()).unwrap();
        let t = &s.truth[0].targets;
        assert!(!t[0].shadowed && t[1].shadowed);
        let peak = |range: f64| {
            let c = (range / 0.35) as usize;
            (c.saturating_sub(3)..c + 3)
                .flat_map(|c| [s.frames[0].data()[[0, c]], s.frames[0].data()[[199, c]]])
                .fold(0.0, f64::max)
        };
        assert!(peak(28.4) < 0.6 * peak(20.0));
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SceneConfig::traffic(5, 3, 3);
        let a = gen_scene(&cfg, &grid()).unwrap();
        let b = gen_scene(&cfg, &grid()).unwrap();
        assert_eq!(a.frames, b.frames);
        let c = gen_scene(&SceneConfig { seed: 6, ..cfg }, &grid()).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn camera_sees_targets_in_its_field_of_view() {
        let cfg = SceneConfig {
            n_frames: 1,
            targets: vec![target([0.0, 30.0], [0.0, 0.0]), target([0.0, -30.0], [0.0, 0.0])],
            ..SceneConfig::default()
        };
        let s = gen_scene(&cfg, &grid()).unwrap();
        let cam = CameraCalibration::new(-33.0, 33.0, 0.0, 1280.0).unwrap();
        let dets = s.camera_detections(&cam);
        assert_eq!(dets.len(), 1);
        let hit = crate::geometry::image_bbox_to_azimuth(&dets[0].bbox, &cam, &grid()).unwrap();
        assert!(hit.azimuth_deg.abs() < 1e-9);
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let mut cfg = SceneConfig {
            n_frames: 0,
            ..SceneConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(SceneError::Invalid { ref field, .. }) if field == "n_frames"));
        cfg.n_frames = 2;
        cfg.targets = vec![target([500.0, 0.0], [0.0, 0.0])];
        assert!(matches!(cfg.validate(), Err(SceneError::Invalid { ref field, .. }) if field == "targets[0]"));
    }
}
