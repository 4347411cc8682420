//! Object detections in the Cartesian rendering and the providers that
//! produce them.
//!
//! Neural detectors run out of process and hand over their boxes as JSON
//! Lines; [`DetectionProvider::FileBacked`] replays them. The built-in
//! [`DetectionProvider::SyntheticThreshold`] finds bright blobs directly and
//! is enough for synthetic scenes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;

pub const DEFAULT_CLASS: &str = "vehicle";

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid detection: {0}")]
    Invalid(String),
}

/// One box; `score` is absent for ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame: u32,
    #[serde(with = "bbox_array")]
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default = "default_class")]
    pub class: String,
}

fn default_class() -> String {
    DEFAULT_CLASS.to_string()
}

mod bbox_array {
    use super::BBox;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(b: &BBox, s: S) -> Result<S::Ok, S::Error> {
        [b.x, b.y, b.w, b.h].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BBox, D::Error> {
        let [x, y, w, h] = <[f64; 4]>::deserialize(d)?;
        Ok(BBox::new(x, y, w, h))
    }
}

impl Detection {
    pub fn new(frame: u32, bbox: BBox, score: Option<f64>) -> Self {
        Self {
            frame,
            bbox,
            score,
            class: default_class(),
        }
    }

    pub fn validate(&self) -> Result<(), DetectionError> {
        if !self.bbox.is_valid() {
            return Err(DetectionError::Invalid(format!("non-positive box {:?}", self.bbox)));
        }
        if let Some(s) = self.score {
            if !(0.0..=1.0).contains(&s) {
                return Err(DetectionError::Invalid(format!("score {s} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Score used for ranking; ground truth counts as 1.
    pub fn confidence(&self) -> f64 {
        self.score.unwrap_or(1.0)
    }
}

/// Reads a detection JSONL file; blank lines are skipped.
pub fn read_jsonl(path: &Path) -> Result<Vec<Detection>, DetectionError> {
    let io = |source| DetectionError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| DetectionError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let det: Detection = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        det.validate().map_err(|e| parse(e.to_string()))?;
        out.push(det);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut w: W, dets: &[Detection]) -> std::io::Result<()> {
    for d in dets {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Groups detections by frame, keeping file order within a frame.
pub fn by_frame(dets: Vec<Detection>) -> BTreeMap<u32, Vec<Detection>> {
    let mut map: BTreeMap<u32, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        map.entry(d.frame).or_default().push(d);
    }
    map
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdParams {
    /// Pixels above `median + k * MAD` are foreground.
    pub k: f64,
    /// Smallest component kept, in pixels.
    pub min_area: usize,
}

impl Default for ThresholdParams {
    fn default() -> Self {
        Self { k: 8.0, min_area: 12 }
    }
}

#[derive(Debug, Clone)]
pub enum DetectionProvider {
    FileBacked {
        path: PathBuf,
        frames: BTreeMap<u32, Vec<Detection>>,
    },
    SyntheticThreshold(ThresholdParams),
    /// Returns nothing; useful for prior-free runs.
    Empty,
}

impl DetectionProvider {
    /// Loads a detection file up front, so unreadable files fail at startup.
    pub fn from_file(path: &Path) -> Result<Self, DetectionError> {
        Ok(Self::FileBacked {
            path: path.to_path_buf(),
            frames: by_frame(read_jsonl(path)?),
        })
    }

    pub fn synthetic(params: ThresholdParams) -> Self {
        Self::SyntheticThreshold(params)
    }

    /// Detections for `frame` on a Cartesian `image`. File-backed providers
    /// ignore the image.
    pub fn detect(&self, frame: u32, image: &Array2<f64>) -> Vec<Detection> {
        match self {
            Self::FileBacked { path, frames } => match frames.get(&frame) {
                Some(d) => d.clone(),
                None => {
                    log::warn!("{} has no detections for frame {frame}", path.display());
                    Vec::new()
                }
            },
            Self::SyntheticThreshold(p) => threshold_detect(frame, image, p),
            Self::Empty => Vec::new(),
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *m;
    if v.len() % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lower + upper) / 2.0
    }
}

/// `(median, median absolute deviation)` of all pixels.
pub fn median_mad(image: &Array2<f64>) -> (f64, f64) {
    let mut v: Vec<f64> = image.iter().copied().collect();
    let med = median(&mut v);
    for x in v.iter_mut() {
        *x = (*x - med).abs();
    }
    (med, median(&mut v))
}

struct Component {
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
    area: usize,
    energy: f64,
}

/// 8-connected components of `mask`, in raster order of their first pixel.
fn components(mask: &Array2<bool>, image: &Array2<f64>) -> Vec<Component> {
    let (rows, cols) = mask.dim();
    let mut seen = Array2::from_elem((rows, cols), false);
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if !mask[[r, c]] || seen[[r, c]] {
                continue;
            }
            let mut comp = Component {
                r0: r,
                r1: r,
                c0: c,
                c1: c,
                area: 0,
                energy: 0.0,
            };
            seen[[r, c]] = true;
            stack.push((r, c));
            while let Some((pr, pc)) = stack.pop() {
                comp.area += 1;
                comp.energy += image[[pr, pc]] * image[[pr, pc]];
                comp.r0 = comp.r0.min(pr);
                comp.r1 = comp.r1.max(pr);
                comp.c0 = comp.c0.min(pc);
                comp.c1 = comp.c1.max(pc);
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (nr, nc) = (pr as i64 + dr, pc as i64 + dc);
                        if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        if mask[[nr, nc]] && !seen[[nr, nc]] {
                            seen[[nr, nc]] = true;
                            stack.push((nr, nc));
                        }
                    }
                }
            }
            out.push(comp);
        }
    }
    out
}

/// Blob detector: threshold at `median + k * MAD`, keep 8-connected
/// components of at least `min_area` pixels. Pixel `(row, col)` covers
/// `[col, col + 1) x [row, row + 1)`. The score is the component's mean
/// squared intensity relative to the image maximum.
pub fn threshold_detect(frame: u32, image: &Array2<f64>, params: &ThresholdParams) -> Vec<Detection> {
    let peak = image.iter().copied().fold(0.0f64, f64::max);
    if peak <= 0.0 {
        return Vec::new();
    }
    let (med, mad) = median_mad(image);
    let thr = med + params.k * mad;
    let mask = image.mapv(|v| v > thr);
    components(&mask, image)
        .into_iter()
        .filter(|c| c.area >= params.min_area.max(1))
        .map(|c| {
            let bbox = BBox::new(
                c.c0 as f64,
                c.r0 as f64,
                (c.c1 - c.c0 + 1) as f64,
                (c.r1 - c.r0 + 1) as f64,
            );
            let score = (c.energy / (c.area as f64 * peak * peak)).clamp(0.0, 1.0);
            Detection::new(frame, bbox, Some(score))
        })
        .collect()
}
