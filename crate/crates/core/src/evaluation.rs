//! Reconstruction and detection metrics.
//!
//! PSNR of two identical frames is `f64::INFINITY`. JSON has no infinity, so
//! reports write it as the string `"inf"` (see [`psnr_serde`]).
//!
//! AP follows the COCO convention for a single class: detections ranked by
//! score over the whole sequence, greedy matching inside each frame, and
//! 101-point interpolated precision, averaged over IOU thresholds
//! 0.50, 0.55, ..., 0.95. AP50 is the 0.50 term alone.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::Detection;
use crate::geometry::{BBox, BlockGrid, BlockIndex, RadarFrame};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("shape mismatch: {a:?} vs {b:?}")]
    Shape { a: (usize, usize), b: (usize, usize) },
    #[error("peak values differ: {a} vs {b}")]
    Peak { a: f64, b: f64 },
    #[error("no cells selected")]
    EmptySelection,
}

/// `10 log10(peak^2 / MSE)`; `INFINITY` when `mse == 0`.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

fn check_pair(a: &RadarFrame, b: &RadarFrame) -> Result<(), EvalError> {
    let (sa, sb) = ((a.rows(), a.cols()), (b.rows(), b.cols()));
    if sa != sb {
        return Err(EvalError::Shape { a: sa, b: sb });
    }
    if a.peak_value() != b.peak_value() {
        return Err(EvalError::Peak {
            a: a.peak_value(),
            b: b.peak_value(),
        });
    }
    Ok(())
}

pub fn mse(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

pub fn psnr(a: &RadarFrame, b: &RadarFrame) -> Result<f64, EvalError> {
    check_pair(a, b)?;
    Ok(psnr_from_mse(mse(a.data(), b.data()), a.peak_value()))
}

/// PSNR over the cells of `blocks` only.
pub fn block_psnr(
    a: &RadarFrame,
    b: &RadarFrame,
    grid: &BlockGrid,
    blocks: &BTreeSet<BlockIndex>,
) -> Result<f64, EvalError> {
    check_pair(a, b)?;
    if blocks.is_empty() {
        return Err(EvalError::EmptySelection);
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for &idx in blocks {
        let (r0, c0) = (idx.az * grid.block_rows, idx.rng * grid.block_cols);
        for r in r0..r0 + grid.block_rows {
            for c in c0..c0 + grid.block_cols {
                let d = a.data()[[r, c]] - b.data()[[r, c]];
                sum += d * d;
                count += 1;
            }
        }
    }
    Ok(psnr_from_mse(sum / count as f64, a.peak_value()))
}

/// Mean of PSNR values; any infinite term makes the mean infinite.
pub fn mean_psnr(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// The ten COCO thresholds, built from integers so that 0.6 is exactly `0.6`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

const IOU_SLACK: f64 = 1e-12;

/// 101-point interpolated AP at one IOU threshold. `None` when there is
/// neither ground truth nor detection.
pub fn ap_at(detections: &[Detection], truth: &[Detection], threshold: f64) -> Option<f64> {
    if truth.is_empty() {
        return if detections.is_empty() { None } else { Some(0.0) };
    }
    let mut gt_by_frame: BTreeMap<u32, Vec<&BBox>> = BTreeMap::new();
    for g in truth {
        gt_by_frame.entry(g.frame).or_default().push(&g.bbox);
    }
    let mut used: BTreeMap<u32, Vec<bool>> = gt_by_frame.iter().map(|(&f, v)| (f, vec![false; v.len()])).collect();

    let mut order: Vec<usize> = (0..detections.len()).collect();
    // stable: equal scores keep input order
    order.sort_by(|&i, &j| detections[j].confidence().total_cmp(&detections[i].confidence()));

    let mut tp = Vec::with_capacity(order.len());
    for &i in &order {
        let d = &detections[i];
        let mut hit = false;
        if let Some(gts) = gt_by_frame.get(&d.frame) {
            let flags = used.get_mut(&d.frame).expect("same keys");
            let mut best: Option<(usize, f64)> = None;
            for (k, g) in gts.iter().enumerate() {
                if flags[k] {
                    continue;
                }
                let v = d.bbox.iou(g);
                if v + IOU_SLACK >= threshold && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((k, v));
                }
            }
            if let Some((k, _)) = best {
                flags[k] = true;
                hit = true;
            }
        }
        tp.push(hit);
    }

    let n_gt = truth.len() as f64;
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut n_tp = 0usize;
    for (k, &hit) in tp.iter().enumerate() {
        n_tp += usize::from(hit);
        recall.push(n_tp as f64 / n_gt);
        precision.push(n_tp as f64 / (k + 1) as f64);
    }
    // precision envelope: best precision at any equal or higher recall
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut total = 0.0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        let pos = recall.partition_point(|&x| x < r - IOU_SLACK);
        if pos < precision.len() {
            total += precision[pos];
        }
    }
    Some(total / 101.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: f64,
    pub ap50: f64,
}

/// AP over the COCO thresholds and AP50; `None` when both inputs are empty.
pub fn average_precision(detections: &[Detection], truth: &[Detection]) -> Option<ApResult> {
    let thresholds = coco_thresholds();
    let per: Vec<f64> = thresholds
        .iter()
        .map(|&t| ap_at(detections, truth, t))
        .collect::<Option<Vec<_>>>()?;
    Some(ApResult {
        ap: per.iter().sum::<f64>() / per.len() as f64,
        ap50: per[0],
    })
}

/// Serializes `f64` with infinities as `"inf"` / `"-inf"` and NaN as `null`.
pub mod psnr_serde {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    struct V;

    impl<'de> Visitor<'de> for V {
        type Value = f64;

        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a number, \"inf\", \"-inf\" or null")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_unit<E: de::Error>(self) -> Result<f64, E> {
            Ok(f64::NAN)
        }

        fn visit_none<E: de::Error>(self) -> Result<f64, E> {
            Ok(f64::NAN)
        }

        fn visit_str<E: de::Error>(self, s: &str) -> Result<f64, E> {
            match s {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                _ => Err(E::invalid_value(de::Unexpected::Str(s), &self)),
            }
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub frame: u32,
    #[serde(with = "psnr_serde")]
    pub psnr: f64,
    pub measurements: u64,
    pub budget: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub frames: Vec<FrameEval>,
    #[serde(with = "psnr_serde")]
    pub mean_psnr: f64,
    /// `None` when neither detections nor ground truth exist.
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub total_measurements: u64,
    pub total_budget: f64,
    /// Measurements per frame sample, averaged over the run.
    pub mean_rate: f64,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn new(
        mode: impl Into<String>,
        frames: Vec<FrameEval>,
        ap: Option<ApResult>,
        samples_per_frame: usize,
        config: serde_json::Value,
    ) -> Self {
        let psnrs: Vec<f64> = frames.iter().map(|f| f.psnr).collect();
        let total_measurements = frames.iter().map(|f| f.measurements).sum::<u64>();
        let total_budget = frames.iter().map(|f| f.budget).sum();
        let denom = (frames.len() * samples_per_frame).max(1) as f64;
        Self {
            mode: mode.into(),
            mean_psnr: mean_psnr(&psnrs).unwrap_or(f64::NAN),
            ap: ap.map(|a| a.ap),
            ap50: ap.map(|a| a.ap50),
            total_measurements,
            total_budget,
            mean_rate: total_measurements as f64 / denom,
            frames,
            config,
        }
    }

    /// CSV with one row per frame: `frame,psnr,measurements,budget`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["frame", "psnr", "measurements", "budget"])?;
        for f in &self.frames {
            out.write_record([
                f.frame.to_string(),
                format_psnr(f.psnr),
                f.measurements.to_string(),
                f.budget.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn format_psnr(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:.4}")
    }
}

/// Precision-recall curve at one threshold as an SVG line plot.
pub fn pr_curve_svg(detections: &[Detection], truth: &[Detection], threshold: f64) -> String {
    let mut order: Vec<&Detection> = detections.iter().collect();
    order.sort_by(|a, b| b.confidence().total_cmp(&a.confidence()));
    let mut pts = vec![(0.0, 1.0)];
    if !truth.is_empty() {
        for k in 1..=order.len() {
            let top: Vec<Detection> = order[..k].iter().map(|d| (*d).clone()).collect();
            let tp = count_true_positives(&top, truth, threshold);
            pts.push((tp as f64 / truth.len() as f64, tp as f64 / k as f64));
        }
    }
    let (w, h, m) = (400.0, 300.0, 30.0);
    let path: Vec<String> = pts
        .iter()
        .map(|(r, p)| format!("{:.2},{:.2}", m + r * (w - 2.0 * m), h - m - p * (h - 2.0 * m)))
        .collect();
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n",
            "<rect x=\"{m}\" y=\"{m}\" width=\"{iw}\" height=\"{ih}\" fill=\"none\" stroke=\"black\"/>\n",
            "<polyline fill=\"none\" stroke=\"blue\" points=\"{pts}\"/>\n",
            "<text x=\"{m}\" y=\"20\">precision vs recall, IOU {t:.2}</text>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        m = m,
        iw = w - 2.0 * m,
        ih = h - 2.0 * m,
        pts = path.join(" "),
        t = threshold
    )
}

fn count_true_positives(dets: &[Detection], truth: &[Detection], threshold: f64) -> usize {
    let mut used = vec![false; truth.len()];
    let mut tp = 0;
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        for (k, g) in truth.iter().enumerate() {
            if used[k] || g.frame != d.frame {
                continue;
            }
            let v = d.bbox.iou(&g.bbox);
            if v + IOU_SLACK >= threshold && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((k, v));
            }
        }
        if let Some((k, _)) = best {
            used[k] = true;
            tp += 1;
        }
    }
    tp
}
