use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use radsamp::allocator::{solve_lp1, solve_lp2, Lp1Inputs, Lp2Inputs, SamplingPlan};
use radsamp::cfar::{blocks_from_mask, ca_cfar, CfarParams};
use radsamp::detection::{self, Detection, DetectionProvider, ThresholdParams};
use radsamp::evaluation::{self, EvalReport, FrameEval};
use radsamp::geometry::{BBox, BlockGrid, BlockIndex, CameraCalibration, RadarFrame};
use radsamp::io::{self as rio, CompressedFrame, FrameFormat};
use radsamp::pipeline::{self, AnchorKind, BudgetRecord, Mode, PipelineConfig, PipelineError, Priors};
use radsamp::scene::{gen_scene, SceneConfig};
use radsamp::sensing::{compress_frame, reconstruct_frame, MatrixKind, SolverSettings};
use radsamp::tracking::{TrackSnapshot, Tracker, TrackerConfig};

const FORMATS: &str = "\
FILE FORMATS

Frames: an image plus a JSON sidecar with the same stem.
  frame_0001.png   16-bit grayscale, row = azimuth bin, col = range bin,
                   pixel = round(value / peak_value * 65535)
  frame_0001.f32   or: rows*cols little-endian f32, row-major
  frame_0001.json  {\"azimuth_res\":1.8,\"range_res\":0.35,\"peak_value\":255.0,
                    \"frame_index\":1,\"rows\":200,\"cols\":288}
  rows/cols are required for .f32 files. azimuth_res must equal 360/rows.

Detections: JSON Lines, one object per box, pixel coordinates of the
Cartesian rendering (or camera image for camera detections):
  {\"frame\":1,\"bbox\":[x,y,w,h],\"score\":0.9,\"class\":\"vehicle\"}
  score is optional (treated as 1.0); class defaults to \"vehicle\".

Compressed frames (.rms), little-endian:
  header 48 bytes: \"RMSF\", u8 version=1, 3 zero bytes, u32 rows, u32 cols,
    u32 block_rows, u32 block_cols, f64 range_res, f64 peak_value,
    u32 frame_index, u32 record count
  per block 32 bytes + 4*m: \"RMSR\", u8 version=1,
    u8 matrix (0 gaussian, 1 bpbd, 2 bpd), 2 zero bytes, u32 m, u32 n,
    u64 seed, u32 azimuth block, u32 range block, m x f32 measurements

Budget CSV columns: frame,anchor,plan,fallback,measurements,spent,budget,
  bits,bits_per_sample,unconverged_blocks

Exit status: 0 success, 1 runtime failure, 2 invalid arguments or config.";

#[derive(Parser)]
#[command(
    name = "radsamp",
    version,
    about = "Adaptive compressed sampling of range-azimuth radar frames",
    after_long_help = FORMATS
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Seed for scene generation and measurement matrices.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config for the subcommand (scene, pipeline, CFAR or tracker).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sequence with ground truth and camera boxes.
    GenScene(GenSceneArgs),
    /// Run a sampling mode over a frame sequence.
    Run(RunArgs),
    /// CA-CFAR on one frame: detection mask and important blocks.
    Cfar(CfarArgs),
    /// Solve one allocation LP and print inputs and solution as JSON.
    #[command(subcommand)]
    Plan(PlanCommand),
    /// Track a detection file and dump per-frame tracks.
    Track(TrackArgs),
    /// Score reconstructions and detections against originals and ground truth.
    Eval(EvalArgs),
    /// Convert a frame between .png and .f32.
    Convert(ConvertArgs),
    /// Compress one frame at a uniform rate into a .rms file.
    Compress(CompressArgs),
    /// Reconstruct a frame from a .rms file.
    Reconstruct(ReconstructArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Png,
    Raw,
}

impl From<Format> for FrameFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Png => FrameFormat::Png,
            Format::Raw => FrameFormat::Raw,
        }
    }
}

#[derive(Args)]
struct GenSceneArgs {
    /// Frames to generate (ignored with --config).
    #[arg(long, default_value_t = 40)]
    frames: usize,
    /// Number of targets (ignored with --config).
    #[arg(long, default_value_t = 4)]
    targets: usize,
    #[arg(long, value_enum, default_value = "png")]
    format: Format,
}

#[derive(Args)]
struct RunArgs {
    /// Directory of input frames.
    #[arg(long)]
    frames: PathBuf,
    /// compradimg, comprpd, rd, standard-cs or cfar.
    #[arg(long)]
    mode: Option<Mode>,
    /// Target sampling rate of non-anchor frames.
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    anchor_period: Option<usize>,
    /// Anchor sampling rate; defaults to max(0.4, rate).
    #[arg(long)]
    anchor_rate: Option<f64>,
    /// cs or quantize3bit.
    #[arg(long)]
    anchor_kind: Option<AnchorKind>,
    /// gaussian, bpbd or bpd.
    #[arg(long)]
    matrix: Option<MatrixKind>,
    /// Radar detections (JSONL). Without it a threshold detector runs on the
    /// reconstructions.
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Camera detections (JSONL) for compradimg.
    #[arg(long)]
    camera_detections: Option<PathBuf>,
    /// Camera calibration JSON: {"theta_min","theta_max","x_min","x_max"}.
    #[arg(long)]
    camera: Option<PathBuf>,
    /// Ground-truth boxes (JSONL); when given, an evaluation report is written.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Minimum component area of the threshold detector, in pixels.
    #[arg(long)]
    min_area: Option<usize>,
    #[arg(long, value_enum, default_value = "png")]
    format: Format,
    /// Also write a precision-recall SVG at IoU 0.5 (needs --gt).
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct CfarArgs {
    /// Frame file (.png or .f32 with sidecar).
    #[arg(long)]
    frame: PathBuf,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_guard: Option<usize>,
    #[arg(long)]
    pfa: Option<f64>,
    #[arg(long, default_value_t = 10)]
    block_rows: usize,
    #[arg(long, default_value_t = 24)]
    block_cols: usize,
}

#[derive(Subcommand)]
enum PlanCommand {
    /// Camera-guided allocation over azimuth categories and range bands.
    Lp1 {
        /// Azimuth-block counts: vulnerable,car,other.
        #[arg(long, value_delimiter = ',', required = true)]
        a: Vec<usize>,
        /// Near range-block count.
        #[arg(long)]
        r1: usize,
        /// Far range-block count.
        #[arg(long)]
        r2: usize,
        /// CFAR promotion terms b1,b2,b3 (b1 >= 0, b2 and b3 <= 0, sum 0).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0,0,0")]
        b: Vec<i64>,
        #[arg(long, default_value_t = 0.1)]
        budget_fraction: f64,
    },
    /// Important versus other blocks at a target rate.
    Lp2 {
        /// Number of important blocks.
        #[arg(long)]
        important: usize,
        #[arg(long, default_value_t = 0.2)]
        target_rate: f64,
        #[arg(long, default_value_t = 200)]
        rows: usize,
        #[arg(long, default_value_t = 288)]
        cols: usize,
        #[arg(long, default_value_t = 10)]
        block_rows: usize,
        #[arg(long, default_value_t = 24)]
        block_cols: usize,
    },
}

#[derive(Args)]
struct TrackArgs {
    /// Detection file (JSONL).
    #[arg(long)]
    detections: PathBuf,
    /// Frames after which tracks are rebuilt (period counted from frame 1).
    #[arg(long)]
    anchor_period: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of original frames.
    #[arg(long)]
    frames: PathBuf,
    /// Directory of reconstructed frames.
    #[arg(long)]
    recon: PathBuf,
    /// Detections to score (JSONL).
    #[arg(long)]
    detections: PathBuf,
    /// Ground-truth boxes (JSONL).
    #[arg(long)]
    gt: PathBuf,
    /// Budget CSV of the run, for measurement totals.
    #[arg(long)]
    budget: Option<PathBuf>,
    /// Label stored in the report.
    #[arg(long, default_value = "eval")]
    label: String,
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    input: PathBuf,
    /// Destination; the extension (.png or .f32) picks the format.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    frame: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    rate: f64,
    #[arg(long, default_value = "bpd")]
    matrix: MatrixKind,
    #[arg(long, default_value_t = 10)]
    block_rows: usize,
    #[arg(long, default_value_t = 24)]
    block_cols: usize,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Compressed frame (.rms).
    #[arg(long)]
    input: PathBuf,
    /// Relative duality gap at which the solver stops.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, value_enum, default_value = "png")]
    format: Format,
}

/// Bad arguments or configuration; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let c = cli.common;
    match cli.command {
        Command::GenScene(a) => cmd_gen_scene(&c, a),
        Command::Run(a) => cmd_run(&c, a),
        Command::Cfar(a) => cmd_cfar(&c, a),
        Command::Plan(p) => cmd_plan(p),
        Command::Track(a) => cmd_track(&c, a),
        Command::Eval(a) => cmd_eval(&c, a),
        Command::Convert(a) => cmd_convert(a),
        Command::Compress(a) => cmd_compress(&c, a),
        Command::Reconstruct(a) => cmd_reconstruct(&c, a),
    }
}

fn read_config_value(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn parse_config<T: serde::de::DeserializeOwned>(path: &Path, value: serde_json::Value) -> Result<T> {
    serde_json::from_value(value).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_or_default<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => parse_config(p, read_config_value(p)?),
        None => Ok(T::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    let f = File::create(path).with_context(|| format!("writing {}", path.display()))?;
    let mut w = BufWriter::new(f);
    detection::write_jsonl(&mut w, dets)?;
    w.flush()?;
    Ok(())
}

fn default_camera() -> CameraCalibration {
    CameraCalibration {
        theta_min: -33.0,
        theta_max: 33.0,
        x_min: 0.0,
        x_max: 1280.0,
    }
}

fn cmd_gen_scene(c: &Common, a: GenSceneArgs) -> Result<()> {
    let mut cfg = match &c.config {
        Some(p) => parse_config::<SceneConfig>(p, read_config_value(p)?)?,
        None => SceneConfig::traffic(c.seed.unwrap_or(0), a.frames, a.targets),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let grid = BlockGrid::new(cfg.rows, cfg.cols, 1, 1, 360.0 / cfg.rows as f64, cfg.range_res)
        .map_err(|e| usage(e.to_string()))?;
    let scene = gen_scene(&cfg, &grid)?;
    create_dir(&c.out)?;
    rio::write_frames(&c.out.join("frames"), &scene.frames, a.format.into())?;
    write_detections(&c.out.join("gt.jsonl"), &scene.gt_detections())?;
    let cam = default_camera();
    write_detections(&c.out.join("camera.jsonl"), &scene.camera_detections(&cam))?;
    write_json(&c.out.join("camera.json"), &cam)?;
    write_json(&c.out.join("scene.json"), &cfg)?;
    write_json(&c.out.join("truth.json"), &scene.truth)?;
    log::info!("wrote {} frames to {}", scene.frames.len(), c.out.display());
    Ok(())
}

fn resolve_pipeline_config(c: &Common, a: &RunArgs) -> Result<PipelineConfig> {
    let (mut cfg, has_anchor_rate) = match &c.config {
        Some(p) => {
            let v = read_config_value(p)?;
            let has = v.get("anchor_rate").is_some();
            (parse_config::<PipelineConfig>(p, v)?, has)
        }
        None => (PipelineConfig::default(), false),
    };
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(r) = a.rate {
        cfg.target_rate = r;
    }
    if let Some(p) = a.anchor_period {
        cfg.anchor_period = p;
    }
    match a.anchor_rate {
        Some(r) => cfg.anchor_rate = r,
        None if !has_anchor_rate => cfg.anchor_rate = cfg.target_rate.max(0.4),
        None => {}
    }
    if let Some(k) = a.anchor_kind {
        cfg.anchor_kind = k;
    }
    if let Some(m) = a.matrix {
        cfg.matrix = m;
    }
    if let Some(s) = c.seed {
        cfg.base_seed = s;
    }
    if let Some(p) = &a.camera {
        cfg.camera = Some(parse_config(p, read_config_value(p)?)?);
    }
    cfg.validate().map_err(|e| match e {
        PipelineError::Config { .. } => usage(e.to_string()),
        other => other.into(),
    })?;
    Ok(cfg)
}

#[derive(Serialize)]
struct PlanDump<'a> {
    frame: u32,
    anchor: bool,
    important: Vec<BlockIndex>,
    final_bb: &'a [BBox],
    plan: &'a SamplingPlan,
}

fn cmd_run(c: &Common, a: RunArgs) -> Result<()> {
    let cfg = resolve_pipeline_config(c, &a)?;
    let frames = rio::read_frames(&a.frames)?;
    if frames.is_empty() {
        bail!(usage(format!("no frames in {}", a.frames.display())));
    }
    let radar = match &a.detections {
        Some(p) => DetectionProvider::from_file(p)?,
        None => DetectionProvider::synthetic(ThresholdParams {
            min_area: a.min_area.unwrap_or(ThresholdParams::default().min_area),
            ..ThresholdParams::default()
        }),
    };
    let camera = match (&a.camera_detections, cfg.mode) {
        (Some(p), _) => Some(DetectionProvider::from_file(p)?),
        (None, Mode::CompRadImg) => return Err(usage("compradimg needs --camera-detections")),
        (None, _) => None,
    };
    let truth = a.gt.as_deref().map(detection::read_jsonl).transpose()?;

    let total = frames.len();
    let results = pipeline::run_with(
        &frames,
        Priors {
            radar: &radar,
            camera: camera.as_ref(),
        },
        &cfg,
        |r| log::info!("frame {}/{total}: {} samples", r.t, r.budget.spent),
    )
    .map_err(|e| match e {
        PipelineError::Config { .. } => usage(e.to_string()),
        other => anyhow!(other),
    })?;

    create_dir(&c.out)?;
    let recon: Vec<RadarFrame> = results.iter().map(|r| r.reconstruction.clone()).collect();
    rio::write_frames(&c.out.join("recon"), &recon, a.format.into())?;
    let plans = c.out.join("plans");
    create_dir(&plans)?;
    for r in &results {
        let dump = PlanDump {
            frame: r.budget.frame,
            anchor: r.anchor,
            important: r.important.iter().copied().collect(),
            final_bb: &r.final_bb,
            plan: &r.plan,
        };
        write_json(&plans.join(format!("frame_{:04}.json", r.budget.frame)), &dump)?;
    }
    let budget = File::create(c.out.join("budget.csv"))?;
    pipeline::write_budget_csv(BufWriter::new(budget), &results)?;
    let dets: Vec<Detection> = results.iter().flat_map(|r| r.detections.iter().cloned()).collect();
    write_detections(&c.out.join("detections.jsonl"), &dets)?;
    write_json(&c.out.join("config.json"), &cfg)?;

    if let Some(truth) = truth {
        let report = pipeline::report(&results, &frames, &truth, &cfg)?;
        write_report(&c.out, &report)?;
        if a.svg {
            fs::write(c.out.join("pr.svg"), evaluation::pr_curve_svg(&dets, &truth, 0.5))?;
        }
        println!(
            "{}: mean PSNR {} dB, AP {}, AP50 {}, mean rate {:.4}",
            report.mode,
            evaluation::format_psnr(report.mean_psnr),
            fmt_opt(report.ap),
            fmt_opt(report.ap50),
            report.mean_rate
        );
    } else if a.svg {
        log::warn!("--svg needs --gt; skipped");
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    write_json(&dir.join("report.json"), report)?;
    let f = File::create(dir.join("report.csv"))?;
    report.write_csv(BufWriter::new(f))?;
    Ok(())
}

#[derive(Serialize)]
struct CfarDump {
    frame: u32,
    params: CfarParams,
    detections: usize,
    blocks: Vec<BlockIndex>,
}

fn cmd_cfar(c: &Common, a: CfarArgs) -> Result<()> {
    let mut params: CfarParams = load_or_default(c.config.as_deref())?;
    if let Some(v) = a.n_train {
        params.n_train = v;
    }
    if let Some(v) = a.n_guard {
        params.n_guard = v;
    }
    if let Some(v) = a.pfa {
        params.pfa = v;
    }
    params.validate().map_err(|e| usage(e.to_string()))?;
    let frame = rio::read_frame(&a.frame)?;
    let grid = BlockGrid::new(
        frame.rows(),
        frame.cols(),
        a.block_rows,
        a.block_cols,
        frame.azimuth_res(),
        frame.range_res(),
    )
    .map_err(|e| usage(e.to_string()))?;
    let mask = ca_cfar(frame.data(), &params)?;
    let blocks = blocks_from_mask(&mask, &grid)?;
    create_dir(&c.out)?;
    rio::write_mask_png(&c.out.join("cfar_mask.png"), &mask)?;
    let dump = CfarDump {
        frame: frame.frame_index(),
        params,
        detections: mask.iter().filter(|&&m| m).count(),
        blocks: blocks.into_iter().collect(),
    };
    write_json(&c.out.join("cfar_blocks.json"), &dump)?;
    println!("{} cells, {} blocks", dump.detections, dump.blocks.len());
    Ok(())
}

#[derive(Serialize)]
struct LpDump<I: Serialize, S: Serialize> {
    inputs: I,
    coefficients: Vec<f64>,
    solution: S,
}

fn cmd_plan(p: PlanCommand) -> Result<()> {
    let text = match p {
        PlanCommand::Lp1 {
            a,
            r1,
            r2,
            b,
            budget_fraction,
        } => {
            if a.len() != 3 || b.len() != 3 {
                bail!(usage("--a and --b take three comma-separated values"));
            }
            let mut inputs = Lp1Inputs::new([a[0], a[1], a[2]], r1, r2, [b[0], b[1], b[2]]);
            inputs.budget_fraction = budget_fraction;
            inputs.validate().map_err(|e| usage(e.to_string()))?;
            let solution = solve_lp1(&inputs)?;
            serde_json::to_string_pretty(&LpDump {
                coefficients: inputs.coefficients().to_vec(),
                inputs,
                solution,
            })?
        }
        PlanCommand::Lp2 {
            important,
            target_rate,
            rows,
            cols,
            block_rows,
            block_cols,
        } => {
            let grid = BlockGrid::new(rows, cols, block_rows, block_cols, 360.0 / rows.max(1) as f64, 1.0)
                .map_err(|e| usage(e.to_string()))?;
            if important > grid.n_blocks() {
                bail!(usage(format!("{important} important blocks but the grid has {}", grid.n_blocks())));
            }
            let inputs = Lp2Inputs::for_target(important, &grid, target_rate);
            inputs.validate().map_err(|e| usage(e.to_string()))?;
            let solution = solve_lp2(&inputs)?;
            serde_json::to_string_pretty(&LpDump {
                coefficients: inputs.coefficients().to_vec(),
                inputs,
                solution,
            })?
        }
    };
    println!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct TrackDump {
    frame: u32,
    final_bb: Vec<BBox>,
    tracks: Vec<TrackSnapshot>,
}

fn cmd_track(c: &Common, a: TrackArgs) -> Result<()> {
    let cfg: TrackerConfig = load_or_default(c.config.as_deref())?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let by_frame = detection::by_frame(detection::read_jsonl(&a.detections)?);
    let (Some(&first), Some(&last)) = (by_frame.keys().next(), by_frame.keys().next_back()) else {
        bail!(usage(format!("{} holds no detections", a.detections.display())));
    };
    let mut tracker = Tracker::new(cfg)?;
    create_dir(&c.out)?;
    let f = File::create(c.out.join("tracks.jsonl"))?;
    let mut w = BufWriter::new(f);
    for frame in first..=last {
        let boxes: Vec<BBox> = by_frame.get(&frame).map_or_else(Vec::new, |d| d.iter().map(|d| d.bbox).collect());
        let post_anchor = frame == first
            || a
                .anchor_period
                .is_some_and(|p| pipeline::anchor_schedule((frame - first) as usize, p));
        let final_bb = tracker.step(&boxes, post_anchor);
        let dump = TrackDump {
            frame,
            final_bb,
            tracks: tracker.tracks().iter().map(|t| t.snapshot()).collect(),
        };
        serde_json::to_writer(&mut w, &dump)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_eval(c: &Common, a: EvalArgs) -> Result<()> {
    let originals = rio::read_frames(&a.frames)?;
    let recon = rio::read_frames(&a.recon)?;
    let dets = detection::read_jsonl(&a.detections)?;
    let truth = detection::read_jsonl(&a.gt)?;
    let budget = match &a.budget {
        Some(p) => read_budget_csv(p)?,
        None => Vec::new(),
    };
    let mut frames = Vec::with_capacity(recon.len());
    for r in &recon {
        let orig = originals
            .iter()
            .find(|o| o.frame_index() == r.frame_index())
            .ok_or_else(|| usage(format!("no original for frame {}", r.frame_index())))?;
        let psnr = evaluation::psnr(orig, r).map_err(|e| usage(e.to_string()))?;
        let rec = budget.iter().find(|b| b.frame == r.frame_index());
        frames.push(FrameEval {
            frame: r.frame_index(),
            psnr,
            measurements: rec.map_or(0, |b| b.spent.round() as u64),
            budget: rec.map_or(0.0, |b| b.budget),
        });
    }
    let ap = evaluation::average_precision(&dets, &truth);
    let samples = originals.first().map_or(0, RadarFrame::len);
    let report = EvalReport::new(a.label, frames, ap, samples, serde_json::Value::Null);
    create_dir(&c.out)?;
    write_report(&c.out, &report)?;
    if a.svg {
        fs::write(c.out.join("pr.svg"), evaluation::pr_curve_svg(&dets, &truth, 0.5))?;
    }
    println!(
        "mean PSNR {} dB, AP {}, AP50 {}",
        evaluation::format_psnr(report.mean_psnr),
        fmt_opt(report.ap),
        fmt_opt(report.ap50)
    );
    Ok(())
}

fn read_budget_csv(path: &Path) -> Result<Vec<BudgetRecord>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    rdr.deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn cmd_convert(a: ConvertArgs) -> Result<()> {
    let format = FrameFormat::from_path(&a.output)
        .ok_or_else(|| usage(format!("{}: extension must be .png or .f32", a.output.display())))?;
    let frame = rio::read_frame(&a.input)?;
    if let Some(dir) = a.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    rio::write_frame(&a.output, &frame, format)?;
    Ok(())
}

fn cmd_compress(c: &Common, a: CompressArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.rate) {
        bail!(usage(format!("rate {} outside [0, 1]", a.rate)));
    }
    let frame = rio::read_frame(&a.frame)?;
    let grid = BlockGrid::new(
        frame.rows(),
        frame.cols(),
        a.block_rows,
        a.block_cols,
        frame.azimuth_res(),
        frame.range_res(),
    )
    .map_err(|e| usage(e.to_string()))?;
    let plan = SamplingPlan::uniform(&grid, a.rate);
    let sets = compress_frame(&frame, &grid, &plan, a.matrix, c.seed.unwrap_or(0))?;
    let cf = CompressedFrame::new(&frame, &grid, sets);
    create_dir(&c.out)?;
    let path = c.out.join(format!("frame_{:04}.rms", frame.frame_index()));
    rio::write_compressed(&path, &cf)?;
    println!("{} measurements -> {}", cf.total_measurements(), path.display());
    Ok(())
}

fn cmd_reconstruct(c: &Common, a: ReconstructArgs) -> Result<()> {
    if !(a.tol > 0.0) {
        bail!(usage(format!("tol {} must be positive", a.tol)));
    }
    let cf = rio::read_compressed(&a.input)?;
    let grid = cf.grid()?;
    let like = cf.template()?;
    let settings = SolverSettings {
        rel_gap_tol: a.tol,
        ..SolverSettings::default()
    };
    let rec = reconstruct_frame(&cf.sets, &grid, &like, &settings)?;
    if rec.unconverged_blocks > 0 {
        log::warn!("{} blocks hit the iteration cap", rec.unconverged_blocks);
    }
    create_dir(&c.out)?;
    let format: FrameFormat = a.format.into();
    let path = c.out.join(rio::frame_file_name(cf.frame_index, format));
    rio::write_frame(&path, &rec.frame, format)?;
    println!("{}", path.display());
    Ok(())
}
