//! Per-frame acquisition loops.
//!
//! Every mode shares the same skeleton. Frame `t` (counted from 1) is an
//! anchor when `t % anchor_period == 1`; anchors are acquired without priors,
//! either by uniform compressed sensing at `anchor_rate` or by 3-bit
//! quantisation. Other frames build a sampling plan from priors gathered on
//! the reconstruction of frame `t - 1`:
//!
//! | mode          | priors                                     | plan  |
//! |---------------|--------------------------------------------|-------|
//! | `comprpd`     | radar detections, Kalman-smoothed          | LP #2 |
//! | `rd`          | radar detections as is                     | LP #2 |
//! | `compradimg`  | camera detections by azimuth, plus CFAR    | LP #1 |
//! | `cfar`        | CFAR-flagged blocks                        | LP #2 |
//! | `standard-cs` | none                                       | uniform |
//!
//! Budgets are in samples. A compressed-sensing frame spends one sample per
//! measurement and counts 8 bits per sample; a quantised anchor spends
//! `bits / 8` sample-equivalents per cell.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::{plan_lp1, plan_lp2, AzCategory, LpError, Provenance, SamplingPlan};
use crate::cfar::{cfar_important_blocks, CfarError, CfarParams};
use crate::detection::{Detection, DetectionProvider};
use crate::evaluation::{self, EvalReport, FrameEval};
use crate::geometry::{
    cartesian_bbox_to_polar_block, image_bbox_to_azimuth, mark_important_blocks_with, polar_to_cartesian, BBox,
    BlockGrid, BlockIndex, CameraCalibration, CartesianGeometry, GeometryError, RadarFrame, Stencil,
};
use crate::sensing::{compress_frame, quantize_frame, reconstruct_frame, MatrixKind, SensingError, SolverSettings};
use crate::tracking::{TrackError, Tracker, TrackerConfig};

/// Bits per raw sample used to convert quantised anchors into sample units.
pub const SAMPLE_BITS: u32 = 8;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config field `{field}`: {message}")]
    Config { field: &'static str, message: String },
    #[error("no frames to process")]
    NoFrames,
    #[error("frame {index} is {rows}x{cols}, expected {exp_rows}x{exp_cols}")]
    FrameShape {
        index: u32,
        rows: usize,
        cols: usize,
        exp_rows: usize,
        exp_cols: usize,
    },
    #[error(transparent)]
    Sensing(#[from] SensingError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Cfar(#[from] CfarError),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Lp(#[from] LpError),
}

fn config_err(field: &'static str, message: impl Into<String>) -> PipelineError {
    PipelineError::Config {
        field,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[serde(rename = "compradimg")]
    CompRadImg,
    #[serde(rename = "comprpd")]
    CompRpd,
    Rd,
    StandardCs,
    #[serde(rename = "cfar")]
    CfarBaseline,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::CompRadImg => "compradimg",
            Mode::CompRpd => "comprpd",
            Mode::Rd => "rd",
            Mode::StandardCs => "standard-cs",
            Mode::CfarBaseline => "cfar",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "compradimg" => Ok(Mode::CompRadImg),
            "comprpd" => Ok(Mode::CompRpd),
            "rd" => Ok(Mode::Rd),
            "standard-cs" => Ok(Mode::StandardCs),
            "cfar" => Ok(Mode::CfarBaseline),
            other => Err(format!(
                "unknown mode `{other}` (compradimg, comprpd, rd, standard-cs, cfar)"
            )),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorKind {
    Cs,
    #[serde(rename = "quantize3bit")]
    Quantize3Bit,
}

impl std::str::FromStr for AnchorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cs" => Ok(AnchorKind::Cs),
            "quantize3bit" => Ok(AnchorKind::Quantize3Bit),
            other => Err(format!("unknown anchor kind `{other}` (cs, quantize3bit)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub target_rate: f64,
    pub anchor_period: usize,
    pub anchor_rate: f64,
    pub anchor_kind: AnchorKind,
    pub anchor_bits: u32,
    pub matrix: MatrixKind,
    pub base_seed: u64,
    pub block_rows: usize,
    pub block_cols: usize,
    pub solver: SolverSettings,
    pub tracker: TrackerConfig,
    pub cfar: CfarParams,
    pub stencil: Stencil,
    /// Rendering the radar detector runs on.
    pub cartesian: CartesianGeometry,
    /// Camera field of view; `compradimg` only.
    pub camera: Option<CameraCalibration>,
    /// Near-range block count for LP #1; `None` scales 18 of 37 to the grid.
    pub lp1_r1: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::CompRpd,
            target_rate: 0.2,
            anchor_period: 20,
            anchor_rate: 0.4,
            anchor_kind: AnchorKind::Cs,
            anchor_bits: 3,
            matrix: MatrixKind::Bpd,
            base_seed: 0,
            block_rows: 10,
            block_cols: 24,
            solver: SolverSettings {
                rel_gap_tol: 1e-4,
                ..SolverSettings::default()
            },
            tracker: TrackerConfig::default(),
            cfar: CfarParams::default(),
            stencil: Stencil::default(),
            cartesian: CartesianGeometry {
                side_px: 256,
                meters_per_pixel: 0.5,
            },
            camera: None,
            lp1_r1: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.target_rate > 0.0 && self.target_rate <= 1.0) {
            return Err(config_err("target_rate", format!("{} outside (0, 1]", self.target_rate)));
        }
        if !(self.anchor_rate >= self.target_rate && self.anchor_rate <= 1.0) {
            return Err(config_err(
                "anchor_rate",
                format!("{} outside [target_rate = {}, 1]", self.anchor_rate, self.target_rate),
            ));
        }
        if self.anchor_period == 0 {
            return Err(config_err("anchor_period", "must be at least 1"));
        }
        if !(1..=16).contains(&self.anchor_bits) {
            return Err(config_err("anchor_bits", format!("{} outside 1..=16", self.anchor_bits)));
        }
        if self.block_rows == 0 || self.block_cols == 0 {
            return Err(config_err("block_rows/block_cols", "must be positive"));
        }
        if self.solver.max_iter == 0 || !(self.solver.rel_gap_tol > 0.0) {
            return Err(config_err("solver", "max_iter and rel_gap_tol must be positive"));
        }
        self.tracker.validate()?;
        self.cfar.validate()?;
        CartesianGeometry::new(self.cartesian.side_px, self.cartesian.meters_per_pixel)?;
        if let Some(cam) = &self.camera {
            cam.validate()?;
        }
        if self.mode == Mode::CompRadImg && self.camera.is_none() {
            return Err(config_err("camera", "compradimg needs a camera calibration"));
        }
        Ok(())
    }

    pub fn grid_for(&self, frame: &RadarFrame) -> Result<BlockGrid, PipelineError> {
        Ok(BlockGrid::new(
            frame.rows(),
            frame.cols(),
            self.block_rows,
            self.block_cols,
            frame.azimuth_res(),
            frame.range_res(),
        )?)
    }

    /// Near-range block count for LP #1.
    pub fn r1_for(&self, grid: &BlockGrid) -> usize {
        self.lp1_r1
            .unwrap_or_else(|| {
                if grid.n_range_blocks == 37 {
                    18
                } else {
                    (grid.n_range_blocks as f64 * 18.0 / 37.0).round() as usize
                }
            })
            .min(grid.n_range_blocks)
    }
}

/// `true` iff frame `t` (counted from 1) is an anchor.
pub fn anchor_schedule(t: usize, period: usize) -> bool {
    debug_assert!(t >= 1);
    period <= 1 || t % period == 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRecord {
    pub frame: u32,
    pub anchor: bool,
    pub plan: String,
    pub fallback: bool,
    /// Compressed-sensing measurements taken.
    pub measurements: u64,
    /// Sample-equivalents spent: measurements, or `bits / 8` when quantised.
    pub spent: f64,
    /// Allowed samples for the frame.
    pub budget: f64,
    pub bits: u64,
    pub bits_per_sample: f64,
    pub unconverged_blocks: usize,
}

/// Outcome of one frame.
#[derive(Debug, Clone)]
pub struct FrameResult {
    /// Position in the sequence, from 1.
    pub t: usize,
    pub anchor: bool,
    pub reconstruction: RadarFrame,
    pub plan: SamplingPlan,
    /// Blocks the plan prioritised.
    pub important: BTreeSet<BlockIndex>,
    /// Boxes that drove the plan (after tracking, for `comprpd`).
    pub final_bb: Vec<BBox>,
    /// Detections on this frame's reconstruction.
    pub detections: Vec<Detection>,
    pub budget: BudgetRecord,
    pub solver_iterations: usize,
}

/// Where a run gets its priors.
pub struct Priors<'a> {
    /// Runs on the Cartesian rendering of each reconstruction.
    pub radar: &'a DetectionProvider,
    /// Camera detections keyed by frame index; `compradimg` only.
    pub camera: Option<&'a DetectionProvider>,
}

/// Azimuth category of a detection class.
pub fn category_of(class: &str) -> AzCategory {
    match class.to_ascii_lowercase().as_str() {
        "pedestrian" | "person" | "bicycle" | "cyclist" | "motorcycle" => AzCategory::Vulnerable,
        "car" | "vehicle" | "van" | "truck" | "bus" => AzCategory::Car,
        _ => AzCategory::Other,
    }
}

/// Per azimuth block, the most vulnerable category seen by the camera.
pub fn azimuth_categories(dets: &[Detection], cam: &CameraCalibration, grid: &BlockGrid) -> Vec<AzCategory> {
    let mut cats = vec![AzCategory::Other; grid.n_az_blocks];
    for d in dets {
        let hit = match image_bbox_to_azimuth(&d.bbox, cam, grid) {
            Ok(h) => h,
            Err(e) => {
                log::warn!("frame {}: skipping camera box: {e}", d.frame);
                continue;
            }
        };
        let cat = category_of(&d.class);
        let slot = &mut cats[hit.az_block];
        *slot = match (*slot, cat) {
            (AzCategory::Vulnerable, _) | (_, AzCategory::Vulnerable) => AzCategory::Vulnerable,
            (AzCategory::Car, _) | (_, AzCategory::Car) => AzCategory::Car,
            _ => AzCategory::Other,
        };
    }
    cats
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    grid: BlockGrid,
    priors: Priors<'a>,
    tracker: Tracker,
}

impl Runner<'_> {
    fn detect(&self, recon: &RadarFrame) -> Result<Vec<Detection>, PipelineError> {
        if matches!(self.priors.radar, DetectionProvider::Empty) {
            return Ok(Vec::new());
        }
        let image = polar_to_cartesian(recon, self.cfg.cartesian.side_px, self.cfg.cartesian.meters_per_pixel)?;
        Ok(self.priors.radar.detect(recon.frame_index(), &image.pixels))
    }

    fn acquire(&self, frame: &RadarFrame, plan: &SamplingPlan) -> Result<(RadarFrame, u64, usize, usize), PipelineError> {
        let sets = compress_frame(frame, &self.grid, plan, self.cfg.matrix, self.cfg.base_seed)?;
        let measurements = sets.iter().map(|s| s.y.len() as u64).sum();
        let rec = reconstruct_frame(&sets, &self.grid, frame, &self.cfg.solver)?;
        if rec.unconverged_blocks > 0 {
            log::warn!(
                "frame {}: {} blocks hit the solver iteration cap",
                frame.frame_index(),
                rec.unconverged_blocks
            );
        }
        Ok((rec.frame, measurements, rec.unconverged_blocks, rec.total_iterations))
    }

    /// Plan for a non-anchor frame from the previous frame's result.
    fn plan(
        &mut self,
        prev: &FrameResult,
        post_anchor: bool,
    ) -> Result<(SamplingPlan, BTreeSet<BlockIndex>, Vec<BBox>), PipelineError> {
        let cfg = self.cfg;
        let grid = &self.grid;
        let geometry = cfg.cartesian;
        let boxes_to_blocks = |boxes: &[BBox]| -> Vec<BlockIndex> {
            boxes
                .iter()
                .filter_map(|b| cartesian_bbox_to_polar_block(b, &geometry, grid).ok())
                .collect()
        };
        Ok(match cfg.mode {
            Mode::StandardCs => (SamplingPlan::uniform(grid, cfg.target_rate), BTreeSet::new(), Vec::new()),
            Mode::CompRpd | Mode::Rd => {
                let boxes: Vec<BBox> = prev.detections.iter().map(|d| d.bbox).collect();
                let final_bb = if cfg.mode == Mode::Rd {
                    boxes
                } else {
                    self.tracker.step(&boxes, post_anchor)
                };
                let important = mark_important_blocks_with(&boxes_to_blocks(&final_bb), grid, cfg.stencil);
                (plan_lp2(grid, &important, cfg.target_rate), important, final_bb)
            }
            Mode::CfarBaseline => {
                let important = cfar_important_blocks(&prev.reconstruction, grid, &cfg.cfar)?;
                (plan_lp2(grid, &important, cfg.target_rate), important, Vec::new())
            }
            Mode::CompRadImg => {
                let cam = cfg.camera.as_ref().ok_or_else(|| config_err("camera", "missing"))?;
                let dets = match self.priors.camera {
                    Some(p) => p.detect(prev.reconstruction.frame_index(), &ndarray::Array2::zeros((0, 0))),
                    None => Vec::new(),
                };
                let cats = azimuth_categories(&dets, cam, grid);
                let flags = cfar_important_blocks(&prev.reconstruction, grid, &cfg.cfar)?;
                let plan = plan_lp1(grid, &cats, &flags, cfg.r1_for(grid), cfg.target_rate, cfg.target_rate)?;
                let important = grid
                    .blocks()
                    .filter(|b| plan.rate(grid, *b) > cfg.target_rate)
                    .collect();
                (plan, important, dets.iter().map(|d| d.bbox).collect())
            }
        })
    }

    fn frame(&mut self, t: usize, frame: &RadarFrame, prev: Option<&FrameResult>) -> Result<FrameResult, PipelineError> {
        let cfg = self.cfg;
        let n = frame.len() as f64;
        let anchor = prev.is_none() || anchor_schedule(t, cfg.anchor_period);
        let (plan, important, final_bb) = match prev {
            Some(p) if !anchor => self.plan(p, p.anchor)?,
            _ => (SamplingPlan::uniform(&self.grid, cfg.anchor_rate), BTreeSet::new(), Vec::new()),
        };

        let (reconstruction, record, iters) = if anchor && cfg.anchor_kind == AnchorKind::Quantize3Bit {
            let q = quantize_frame(frame, cfg.anchor_bits)?;
            let bits = frame.len() as u64 * u64::from(cfg.anchor_bits);
            let spent = bits as f64 / f64::from(SAMPLE_BITS);
            let record = BudgetRecord {
                frame: frame.frame_index(),
                anchor,
                plan: format!("quantize{}bit", cfg.anchor_bits),
                fallback: false,
                measurements: 0,
                spent,
                budget: spent,
                bits,
                bits_per_sample: f64::from(cfg.anchor_bits),
                unconverged_blocks: 0,
            };
            (q, record, 0)
        } else {
            let (rec, measurements, unconverged_blocks, iters) = self.acquire(frame, &plan)?;
            let rate = if anchor { cfg.anchor_rate } else { cfg.target_rate };
            let bits = measurements * u64::from(SAMPLE_BITS);
            let record = BudgetRecord {
                frame: frame.frame_index(),
                anchor,
                plan: plan_label(&plan.provenance).to_string(),
                fallback: plan.is_fallback(),
                measurements,
                spent: measurements as f64,
                budget: rate * n,
                bits,
                bits_per_sample: bits as f64 / n,
                unconverged_blocks,
            };
            (rec, record, iters)
        };
        let detections = self.detect(&reconstruction)?;
        Ok(FrameResult {
            t,
            anchor,
            reconstruction,
            plan,
            important,
            final_bb,
            detections,
            budget: record,
            solver_iterations: iters,
        })
    }
}

fn plan_label(p: &Provenance) -> &'static str {
    match p {
        Provenance::Uniform { .. } => "uniform",
        Provenance::Lp1 { .. } => "lp1",
        Provenance::Lp2 { .. } => "lp2",
        Provenance::Fallback { .. } => "fallback",
        Provenance::Custom => "custom",
    }
}

/// Runs `cfg.mode` over a sequence. Frames must share one shape.
pub fn run(frames: &[RadarFrame], priors: Priors<'_>, cfg: &PipelineConfig) -> Result<Vec<FrameResult>, PipelineError> {
    run_with(frames, priors, cfg, |_| {})
}

/// Like [`run`], calling `progress` after each frame.
pub fn run_with(
    frames: &[RadarFrame],
    priors: Priors<'_>,
    cfg: &PipelineConfig,
    mut progress: impl FnMut(&FrameResult),
) -> Result<Vec<FrameResult>, PipelineError> {
    cfg.validate()?;
    let first = frames.first().ok_or(PipelineError::NoFrames)?;
    let grid = cfg.grid_for(first)?;
    for f in frames {
        if f.rows() != first.rows() || f.cols() != first.cols() {
            return Err(PipelineError::FrameShape {
                index: f.frame_index(),
                rows: f.rows(),
                cols: f.cols(),
                exp_rows: first.rows(),
                exp_cols: first.cols(),
            });
        }
    }
    let mut runner = Runner {
        cfg,
        grid,
        priors,
        tracker: Tracker::new(cfg.tracker)?,
    };
    let mut results: Vec<FrameResult> = Vec::with_capacity(frames.len());
    for (k, frame) in frames.iter().enumerate() {
        let r = runner.frame(k + 1, frame, results.last())?;
        progress(&r);
        results.push(r);
    }
    Ok(results)
}

fn with_mode(cfg: &PipelineConfig, mode: Mode) -> PipelineConfig {
    PipelineConfig { mode, ..cfg.clone() }
}

pub fn run_comprpd(
    frames: &[RadarFrame],
    provider: &DetectionProvider,
    cfg: &PipelineConfig,
) -> Result<Vec<FrameResult>, PipelineError> {
    run(frames, Priors { radar: provider, camera: None }, &with_mode(cfg, Mode::CompRpd))
}

pub fn run_rd(
    frames: &[RadarFrame],
    provider: &DetectionProvider,
    cfg: &PipelineConfig,
) -> Result<Vec<FrameResult>, PipelineError> {
    run(frames, Priors { radar: provider, camera: None }, &with_mode(cfg, Mode::Rd))
}

/// `radar` only supplies detections for evaluation; the plan uses the camera
/// and CFAR.
pub fn run_compradimg(
    frames: &[RadarFrame],
    camera: &DetectionProvider,
    radar: &DetectionProvider,
    cfg: &PipelineConfig,
) -> Result<Vec<FrameResult>, PipelineError> {
    run(
        frames,
        Priors {
            radar,
            camera: Some(camera),
        },
        &with_mode(cfg, Mode::CompRadImg),
    )
}

pub fn run_standard_cs(
    frames: &[RadarFrame],
    provider: &DetectionProvider,
    cfg: &PipelineConfig,
) -> Result<Vec<FrameResult>, PipelineError> {
    run(frames, Priors { radar: provider, camera: None }, &with_mode(cfg, Mode::StandardCs))
}

pub fn run_cfar_baseline(
    frames: &[RadarFrame],
    provider: &DetectionProvider,
    cfg: &PipelineConfig,
) -> Result<Vec<FrameResult>, PipelineError> {
    run(frames, Priors { radar: provider, camera: None }, &with_mode(cfg, Mode::CfarBaseline))
}

/// Budget CSV, one row per frame.
pub fn write_budget_csv<W: std::io::Write>(w: W, results: &[FrameResult]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    for r in results {
        out.serialize(&r.budget)?;
    }
    out.flush()?;
    Ok(())
}

/// The accounting identity every run satisfies:
/// `sum(spent) <= sum(budget) + frames * blocks`.
pub fn budget_slack(results: &[FrameResult], n_blocks: usize) -> f64 {
    let spent: f64 = results.iter().map(|r| r.budget.spent).sum();
    let budget: f64 = results.iter().map(|r| r.budget.budget).sum();
    budget + (results.len() * n_blocks) as f64 - spent
}

/// PSNR against the originals, AP against `truth` and budget totals.
pub fn report(
    results: &[FrameResult],
    originals: &[RadarFrame],
    truth: &[Detection],
    cfg: &PipelineConfig,
) -> Result<EvalReport, PipelineError> {
    let mut frames = Vec::with_capacity(results.len());
    for (r, orig) in results.iter().zip(originals) {
        let psnr = evaluation::psnr(orig, &r.reconstruction).map_err(|e| config_err("frames", e.to_string()))?;
        frames.push(FrameEval {
            frame: r.budget.frame,
            psnr,
            measurements: r.budget.spent.round() as u64,
            budget: r.budget.budget,
        });
    }
    let dets: Vec<Detection> = results.iter().flat_map(|r| r.detections.iter().cloned()).collect();
    let ap = evaluation::average_precision(&dets, truth);
    let samples = originals.first().map_or(0, RadarFrame::len);
    Ok(EvalReport::new(
        cfg.mode.name(),
        frames,
        ap,
        samples,
        serde_json::to_value(cfg).unwrap_or_default(),
    ))
}
