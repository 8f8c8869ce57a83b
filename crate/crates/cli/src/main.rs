use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use radcal_core::align::{
    align, apply_alignment, screen_and_refine, select_threshold, AlignError, AlignmentReport, Sampling,
};
use radcal_core::geometry::{DepthImage, Image, RadarPoint};
use radcal_core::io::{self, read_csv, read_json, read_pfm, write_atomic, write_csv, write_json, write_pfm};
use radcal_core::labelgen::{build_labels, LabelParams, PointLabels};
use radcal_core::metrics::{error_map, evaluate_sweep, MetricsError};
use radcal_core::refiner::{
    forward, network_inputs, train, ParamManifest, RefinerConfig, RefinerError, RefinerOutput, RefinerParams, Sample,
};
use radcal_core::synth::{generate, read_frame, write_frame, FrameMeta, SceneConfig};

mod exit {
    pub const OTHER: u8 = 1;
    pub const BAD_CONFIG: u8 = 2;
    pub const EMPTY_RADAR: u8 = 3;
    pub const DIVERGED: u8 = 4;
    pub const NO_FEASIBLE_THRESHOLD: u8 = 5;
    pub const EMPTY_EVALUATION: u8 = 6;
}

/// Radar-anchored metric depth pipeline.
///
/// Exit codes: 0 success, 1 other failure, 2 bad config or arguments,
/// 3 empty radar, 4 training diverged, 5 no feasible alignment threshold,
/// 6 nothing to evaluate.
#[derive(Debug, Parser)]
#[command(name = "radcal", version)]
struct Cli {
    /// Overrides the seed of commands that draw random numbers.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic frame bundle.
    Synth,
    /// Build confidence and displacement labels for a frame.
    Labels(LabelsArgs),
    /// Train the refiner on labeled frames.
    Train(TrainArgs),
    /// Align the monocular inverse depth of a frame to metric depth.
    Align(AlignArgs),
    /// Evaluate a depth map against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct LabelsArgs {
    /// Frame bundle directory. Labels go there unless `--out` is given.
    #[arg(long)]
    frame: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Frame directories, each holding a bundle and its `labels.csv`.
    #[arg(required = true)]
    frames: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct AlignArgs {
    #[arg(long)]
    frame: PathBuf,
    /// Directory with `params.bin` and `params.json` from `train`.
    #[arg(long, conflicts_with = "oracle_screen", required_unless_present = "oracle_screen")]
    params: Option<PathBuf>,
    /// Use the frame's ground-truth confidence labels instead of the network,
    /// with zero displacement.
    #[arg(long)]
    oracle_screen: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Range caps in meters, ascending.
    #[arg(long, value_delimiter = ',', default_values_t = vec![50.0, 70.0, 80.0])]
    caps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct AlignConfig {
    /// Confidence threshold for screening.
    tau: f64,
    sampling: Sampling,
    /// Explicit threshold candidates; anchor deciles when absent.
    candidates: Option<Vec<f64>>,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self { tau: 0.5, sampling: Sampling::Nearest, candidates: None }
    }
}

#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    config: Option<PathBuf>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seed: Option<u64>,
    wall_time_s: f64,
    version: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    u: f64,
    v: f64,
    depth: f64,
    conf_label: u8,
    du: i32,
    dv: i32,
    is_valid: u8,
}

#[derive(Debug, Serialize)]
struct AnchorRow {
    u: f64,
    v: f64,
    depth: f64,
    confidence: f64,
}

#[derive(Debug, Serialize)]
struct EvalRow {
    cap_m: f64,
    mae_mm: f64,
    rmse_mm: f64,
    absrel: f64,
    sqrel: f64,
    delta1: f64,
    count: usize,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

trait Code<T> {
    fn code(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Code<T> for Result<T, E> {
    fn code(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(error: E) -> Self {
        Self { code: exit::OTHER, error: error.into() }
    }
}

type Run<T> = Result<T, Failure>;

fn load_config<T: Default + for<'de> Deserialize<'de>>(path: Option<&Path>) -> Run<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .code(exit::BAD_CONFIG)?;
    serde_json::from_str(&text)
        .with_context(|| format!("cannot parse config {}", path.display()))
        .code(exit::BAD_CONFIG)
}

fn out_dir(cli: &Cli) -> Run<&Path> {
    cli.out.as_deref().ok_or_else(|| anyhow!("--out is required")).code(exit::BAD_CONFIG)
}

fn write_manifest(cli: &Cli, dir: &Path, command: &str, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>, start: Instant) -> Run<()> {
    let manifest = RunManifest {
        command: command.into(),
        config: cli.config.clone(),
        inputs,
        outputs,
        seed: cli.seed,
        wall_time_s: start.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").into(),
    };
    write_json(&dir.join(format!("manifest.{command}.json")), &manifest)?;
    Ok(())
}

fn cmd_synth(cli: &Cli, start: Instant) -> Run<()> {
    let mut cfg: SceneConfig = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate().context("invalid scene config").code(exit::BAD_CONFIG)?;
    let out = out_dir(cli)?;
    let frame = generate(&cfg)?;
    write_frame(out, &frame)?;
    let outputs = radcal_core::synth::BUNDLE_FILES.iter().map(|f| out.join(f)).collect();
    write_manifest(cli, out, "synth", vec![], outputs, start)
}

fn frame_points(dir: &Path) -> Run<(radcal_core::synth::FrameBundle, Vec<RadarPoint>)> {
    let frame = read_frame(dir).with_context(|| format!("cannot read frame {}", dir.display()))?;
    let points = frame.radar_points()?;
    Ok((frame, points))
}

fn cmd_labels(cli: &Cli, args: &LabelsArgs, start: Instant) -> Run<()> {
    let params: LabelParams = load_config(cli.config.as_deref())?;
    params.validate().context("invalid label config").code(exit::BAD_CONFIG)?;
    let (frame, points) = frame_points(&args.frame)?;
    if points.is_empty() {
        return Err(anyhow!("frame {} has no radar returns in view", args.frame.display())).code(exit::EMPTY_RADAR);
    }
    let labels = build_labels(&points, &frame.lidar, &params)?;
    let rows: Vec<LabelRow> = points
        .iter()
        .zip(&labels)
        .map(|(p, l)| LabelRow {
            u: p.u,
            v: p.v,
            depth: p.depth,
            conf_label: l.conf_label,
            du: l.disp_label.0,
            dv: l.disp_label.1,
            is_valid: u8::from(l.is_valid),
        })
        .collect();
    let out = cli.out.as_deref().unwrap_or(&args.frame);
    let path = out.join("labels.csv");
    write_csv(&path, &rows)?;
    write_manifest(cli, out, "labels", vec![args.frame.clone()], vec![path], start)
}

fn load_image(dir: &Path, meta: &FrameMeta) -> Run<Image> {
    let pgm = io::read_pgm(&dir.join("image.pgm"))?;
    if (pgm.width, pgm.height) != (meta.camera.width, meta.camera.height) {
        return Err(anyhow!("{}: image size does not match the camera", dir.display()).into());
    }
    Ok(Image { channels: 1, height: pgm.height, width: pgm.width, data: pgm.values })
}

fn labeled_sample(dir: &Path, cfg: &RefinerConfig) -> Run<Sample> {
    let meta: FrameMeta = read_json(&dir.join("meta.json"))?;
    let image = load_image(dir, &meta)?;
    let rows: Vec<LabelRow> = read_csv(&dir.join("labels.csv"))?;
    let points: Vec<RadarPoint> =
        rows.iter().map(|r| RadarPoint { position: Vector3::zeros(), u: r.u, v: r.v, depth: r.depth }).collect();
    let labels: Vec<PointLabels> = rows
        .iter()
        .map(|r| PointLabels {
            conf_label: r.conf_label,
            disp_label: (r.du, r.dv),
            is_valid: r.is_valid != 0,
            conf_count: 0,
            disp_count: 0,
            disp_degenerate: false,
        })
        .collect();
    Sample::from_labels(&points, &labels, &image, cfg).code(exit::BAD_CONFIG)
}

fn cmd_train(cli: &Cli, args: &TrainArgs, start: Instant) -> Run<()> {
    let mut cfg: RefinerConfig = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate().context("invalid refiner config").code(exit::BAD_CONFIG)?;
    let out = out_dir(cli)?;
    let dataset = args.frames.iter().map(|d| labeled_sample(d, &cfg)).collect::<Run<Vec<_>>>()?;
    let outcome = match train(&dataset, &cfg) {
        Ok(o) => o,
        Err(e @ RefinerError::Diverged { .. }) => return Err(anyhow!(e)).code(exit::DIVERGED),
        Err(e) => return Err(anyhow!(e).into()),
    };
    let (bin, json, loss) = (out.join("params.bin"), out.join("params.json"), out.join("loss.csv"));
    write_atomic(&bin, &outcome.params.to_bytes())?;
    write_json(&json, &outcome.params.manifest())?;
    write_csv(&loss, &outcome.history)?;
    write_manifest(cli, out, "train", args.frames.clone(), vec![bin, json, loss], start)
}

fn load_params(dir: &Path) -> Run<RefinerParams> {
    let manifest: ParamManifest = read_json(&dir.join("params.json"))?;
    let path = dir.join("params.bin");
    let bytes = std::fs::read(&path).with_context(|| format!("cannot read {}", path.display()))?;
    RefinerParams::from_parts(&manifest, &bytes).with_context(|| format!("invalid parameters in {}", dir.display())).code(exit::BAD_CONFIG)
}

fn cmd_align(cli: &Cli, args: &AlignArgs, start: Instant) -> Run<()> {
    let cfg: AlignConfig = load_config(cli.config.as_deref())?;
    if !(cfg.tau > 0.0 && cfg.tau < 1.0) {
        return Err(anyhow!("tau must lie in (0, 1), got {}", cfg.tau)).code(exit::BAD_CONFIG);
    }
    let out = out_dir(cli)?;
    let (frame, points) = frame_points(&args.frame)?;
    let mut inputs = vec![args.frame.clone()];
    let outputs = match &args.params {
        Some(dir) => {
            inputs.push(dir.clone());
            let params = load_params(dir)?;
            if points.is_empty() {
                RefinerOutput { confidence: vec![], displacement: vec![] }
            } else {
                let (features, patches) = network_inputs(&points, &frame.image, &params.config).code(exit::BAD_CONFIG)?;
                forward(&params, &features, &patches)?
            }
        }
        None => {
            let labels = build_labels(&points, &frame.lidar, &LabelParams::default())?;
            RefinerOutput {
                confidence: labels.iter().map(|l| f64::from(l.conf_label)).collect(),
                displacement: vec![[0.0; 2]; points.len()],
            }
        }
    };
    let cam = frame.meta.camera;
    let anchors = screen_and_refine(&points, &outputs, cfg.tau, cam.width, cam.height)?;
    let infeasible = |e: AlignError| -> Failure {
        let code = match e {
            AlignError::NoFeasibleThreshold | AlignError::NoAnchorSamples | AlignError::EmptyCandidates => {
                exit::NO_FEASIBLE_THRESHOLD
            }
            _ => exit::OTHER,
        };
        Failure { code, error: anyhow!(e).context(format!("alignment of {} failed", args.frame.display())) }
    };
    let (aligned, report) = match &cfg.candidates {
        None => {
            let (_, aligned, report) = align(&anchors, &frame.mono_inv, cfg.sampling).map_err(infeasible)?;
            (aligned, report)
        }
        Some(c) => {
            let a = select_threshold(&anchors, &frame.mono_inv, c, cfg.sampling).map_err(infeasible)?;
            let aligned = apply_alignment(&frame.mono_inv, &a);
            let report = AlignmentReport {
                alpha: a.alpha,
                beta: a.beta,
                t_star: a.t_star,
                residual: a.residual,
                mean_residual: a.mean_residual,
                inliers: a.inliers,
                anchors: anchors.len(),
                candidates: c.clone(),
                undefined_pixels: aligned.undefined_pixels(),
                nonpositive_pixels: aligned.nonpositive_pixels,
            };
            (aligned, report)
        }
    };
    let (pfm, json, csv) = (out.join("aligned.pfm"), out.join("alignment.json"), out.join("anchors.csv"));
    write_pfm(&pfm, cam.width, cam.height, &aligned.depth.depth)?;
    write_json(&json, &report)?;
    let rows: Vec<AnchorRow> =
        anchors.iter().map(|a| AnchorRow { u: a.u, v: a.v, depth: a.depth, confidence: a.confidence }).collect();
    write_csv(&csv, &rows)?;
    write_manifest(cli, out, "align", inputs, vec![pfm, json, csv], start)
}

fn read_depth(path: &Path) -> Run<DepthImage> {
    let m = read_pfm(path)?;
    DepthImage::from_depth(m.width, m.height, m.values).map_err(|e| anyhow!("{}: {e}", path.display()).into())
}

fn cmd_eval(cli: &Cli, args: &EvalArgs, start: Instant) -> Run<()> {
    let out = out_dir(cli)?;
    let pred = read_depth(&args.pred)?;
    let gt = read_depth(&args.gt)?;
    let reports = evaluate_sweep(&pred, &gt, &args.caps).map_err(|e| {
        let code = match e {
            MetricsError::EmptyEvaluation { .. } => exit::EMPTY_EVALUATION,
            MetricsError::InvalidCaps => exit::BAD_CONFIG,
            MetricsError::ShapeMismatch { .. } => exit::OTHER,
        };
        Failure { code, error: anyhow!(e) }
    })?;
    let errors = error_map(&pred, &gt)?;
    let (json, csv, map) = (out.join("eval.json"), out.join("eval.csv"), out.join("error_map.pfm"));
    write_json(&json, &reports)?;
    let rows: Vec<EvalRow> = reports
        .iter()
        .map(|r| EvalRow {
            cap_m: r.cap_m,
            mae_mm: r.mae_mm,
            rmse_mm: r.rmse_mm,
            absrel: r.absrel,
            sqrel: r.sqrel,
            delta1: r.delta1,
            count: r.count,
        })
        .collect();
    write_csv(&csv, &rows)?;
    write_pfm(&map, gt.width, gt.height, &errors)?;
    write_manifest(cli, out, "eval", vec![args.pred.clone(), args.gt.clone()], vec![json, csv, map], start)
}

fn run(cli: &Cli) -> Run<()> {
    let start = Instant::now();
    match &cli.command {
        Command::Synth => cmd_synth(cli, start),
        Command::Labels(a) => cmd_labels(cli, a, start),
        Command::Train(a) => cmd_train(cli, a, start),
        Command::Align(a) => cmd_align(cli, a, start),
        Command::Eval(a) => {
            if a.caps.is_empty() {
                bail_code(exit::BAD_CONFIG, "at least one cap is required")?;
            }
            cmd_eval(cli, a, start)
        }
    }
}

fn bail_code(code: u8, msg: &str) -> Run<()> {
    Err(Failure { code, error: anyhow!(msg.to_string()) })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
