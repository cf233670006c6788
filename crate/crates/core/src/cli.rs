//! Command-line front end.
//!
//! Every subcommand reads an optional JSON [`PipelineConfig`], applies flag
//! overrides, validates the result and writes a `report.json` next to its
//! artifacts. Reports hold only values that are a function of the inputs, so
//! identical invocations produce byte-identical files. Wall-clock timings go
//! to a separate `timings.json`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::attention::{self, AttentionError};
use crate::diffusion::{
    make_schedule, ConditionalGmmDenoiser, DiffusionError, GaussianMixtureModel, GuidedDenoiser, ScheduleKind,
};
use crate::lift::{
    diffusion_fill_refiner, lift_sequence, warp_frame, Direction, LiftConfig, LiftError, Refiner, ToyDiffusionRefiner,
    WarpOrigin,
};
use crate::metrics::{self, json_number, MetricsError};
use crate::scene::raster::FloatRaster;
use crate::scene::{
    load_scene, read_raster, save_scene, synth_scene, write_raster, CameraPose, DepthMap, ImageBuffer, Raster, Scene,
    SceneError, SynthConfig,
};
use crate::segmatch::{build_attention_mask, downsample_map, match_classes, SegmatchError, UnmatchedPolicy};
use crate::warp::{normalized_depth, FlowParams, RefinerCondition, SelectionStrategy, SplatParams, WarpError};

/// Environment variable consulted when `--threads` is absent.
pub const THREADS_ENV: &str = "RESTYLE_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("unknown subcommand {0:?} (expected synth, stylize, lift, warp, inspect-mask or eval)")]
    UnknownSubcommand(String),
    #[error("{0}")]
    Usage(String),
    #[error("invalid value for `{key}`: {reason}")]
    ConfigValidation { key: String, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Segmatch(#[from] SegmatchError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error(transparent)]
    Lift(#[from] LiftError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl CliError {
    /// 1 for invalid invocations and configs, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::UnknownSubcommand(_) | CliError::Usage(_) | CliError::ConfigValidation { .. } => 1,
            _ => 2,
        }
    }

    /// Short machine-readable name of the failure.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::UnknownSubcommand(_) => "UnknownSubcommand",
            CliError::Usage(_) => "Usage",
            CliError::ConfigValidation { .. } => "ConfigValidation",
            CliError::Io { .. } => "Io",
            CliError::Metrics(e) => match e {
                MetricsError::EmptyMask => "EmptyMask",
                MetricsError::TooSmall { .. } => "TooSmall",
                MetricsError::LengthMismatch { .. } => "LengthMismatch",
                MetricsError::DegenerateAlignment(_) => "DegenerateAlignment",
                MetricsError::EmptyErrors => "EmptyErrors",
                MetricsError::InvalidInput(_) => "InvalidInput",
            },
            CliError::Lift(LiftError::NoOverlap { .. }) => "NoOverlap",
            CliError::Lift(LiftError::AllMissing) => "AllMissing",
            CliError::Scene(SceneError::MagicMismatch { .. }) => "MagicMismatch",
            CliError::Scene(SceneError::MissingFile { .. }) => "MissingFile",
            CliError::Scene(SceneError::DimensionMismatch { .. }) => "DimensionMismatch",
            _ => "RuntimeError",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn invalid(key: &str, reason: impl Into<String>) -> CliError {
    CliError::ConfigValidation {
        key: key.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RefinerKind {
    #[default]
    Fill,
    Toy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSettings {
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub alpha: f64,
    pub lambda_s: f64,
    pub lambda_d: f64,
    pub strength: f64,
    pub reimpose: bool,
    pub mixture_components: usize,
}

impl Default for DiffusionSettings {
    fn default() -> Self {
        Self {
            steps: 50,
            schedule: ScheduleKind::default(),
            alpha: 1.5,
            lambda_s: 0.5,
            lambda_d: 0.5,
            strength: 0.3,
            reimpose: true,
            mixture_components: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarpSettings {
    pub beta: f64,
    pub gamma: f64,
    pub eps_cov: f64,
    pub strategy: SelectionStrategy,
    pub direction: Direction,
    pub origin: WarpOrigin,
    pub allow_gaps: bool,
    pub refiner: RefinerKind,
}

impl Default for WarpSettings {
    fn default() -> Self {
        Self {
            beta: 10.0,
            gamma: 1.0,
            eps_cov: 1e-4,
            strategy: SelectionStrategy::LastPlusTwoRandom,
            direction: Direction::Forward,
            origin: WarpOrigin::Selected,
            allow_gaps: false,
            refiner: RefinerKind::Fill,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionSettings {
    /// Token patch size in pixels.
    pub patch: usize,
    pub temperature: f64,
    pub unmatched: UnmatchedPolicy,
}

impl Default for AttentionSettings {
    fn default() -> Self {
        Self {
            patch: 8,
            temperature: 0.05,
            unmatched: UnmatchedPolicy::GlobalAttend,
        }
    }
}

/// Every tunable of the pipeline. Loaded from JSON, then overridden by flags.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub diffusion: DiffusionSettings,
    pub warp: WarpSettings,
    pub attention: AttentionSettings,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| invalid("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.diffusion;
        if !(d.lambda_s >= 0.0 && d.lambda_d >= 0.0 && (d.lambda_s + d.lambda_d - 1.0).abs() <= 1e-9) {
            return Err(invalid(
                "diffusion.lambda",
                format!(
                    "lambda_s + lambda_d must equal 1 with both non-negative, got {} + {}",
                    d.lambda_s, d.lambda_d
                ),
            ));
        }
        if d.steps == 0 || d.steps > 10_000 {
            return Err(invalid("diffusion.steps", "must be in 1..=10000"));
        }
        if !d.alpha.is_finite() || d.alpha < 0.0 {
            return Err(invalid("diffusion.alpha", "must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&d.strength) {
            return Err(invalid("diffusion.strength", "must be in [0, 1]"));
        }
        if d.mixture_components == 0 {
            return Err(invalid("diffusion.mixture_components", "must be positive"));
        }
        make_schedule(d.steps, d.schedule).map_err(|e| invalid("diffusion.schedule", e.to_string()))?;
        let w = &self.warp;
        if !(w.beta.is_finite() && w.beta >= 0.0) {
            return Err(invalid("warp.beta", "must be finite and non-negative"));
        }
        if !(w.gamma.is_finite() && w.gamma >= 0.0) {
            return Err(invalid("warp.gamma", "must be finite and non-negative"));
        }
        if !(w.eps_cov > 0.0 && w.eps_cov < 1.0) {
            return Err(invalid("warp.eps_cov", "must be in (0, 1)"));
        }
        let a = &self.attention;
        if a.patch == 0 {
            return Err(invalid("attention.patch", "must be positive"));
        }
        if !(a.temperature > 0.0 && a.temperature.is_finite()) {
            return Err(invalid("attention.temperature", "must be positive"));
        }
        Ok(())
    }

    pub fn lift_config(&self) -> LiftConfig {
        LiftConfig {
            strategy: self.warp.strategy,
            gamma: self.warp.gamma,
            splat: self.splat_params(),
            flow: FlowParams::default(),
            direction: self.warp.direction,
            origin: self.warp.origin,
            allow_gaps: self.warp.allow_gaps,
        }
    }

    pub fn splat_params(&self) -> SplatParams {
        SplatParams {
            eps_cov: self.warp.eps_cov,
            beta: self.warp.beta,
        }
    }
}

/// Configuration file plus flag overrides shared by the subcommands.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON pipeline config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda_s: Option<f64>,
    #[arg(long)]
    pub lambda_d: Option<f64>,
    #[arg(long)]
    pub strength: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub eps_cov: Option<f64>,
    /// last, all or ours.
    #[arg(long)]
    pub strategy: Option<SelectionStrategy>,
    #[arg(long, value_enum)]
    pub direction: Option<DirectionArg>,
    #[arg(long, value_enum)]
    pub refiner: Option<RefinerKind>,
    /// Refine frames with no warp coverage instead of aborting.
    #[arg(long)]
    pub allow_gaps: bool,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, value_enum)]
    pub policy: Option<PolicyArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DirectionArg {
    Forward,
    Backward,
    Both,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    GlobalAttend,
    KeepSource,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::from_json(&read_text(path)?)?,
            None => PipelineConfig::default(),
        };
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value {
                    $field = v;
                }
            };
        }
        set!(cfg.seed, self.seed);
        set!(cfg.diffusion.steps, self.steps);
        set!(cfg.diffusion.alpha, self.alpha);
        set!(cfg.diffusion.lambda_s, self.lambda_s);
        set!(cfg.diffusion.lambda_d, self.lambda_d);
        set!(cfg.diffusion.strength, self.strength);
        set!(cfg.warp.beta, self.beta);
        set!(cfg.warp.gamma, self.gamma);
        set!(cfg.warp.eps_cov, self.eps_cov);
        set!(cfg.warp.strategy, self.strategy);
        set!(cfg.warp.refiner, self.refiner);
        set!(cfg.attention.patch, self.patch);
        set!(cfg.attention.temperature, self.temperature);
        if let Some(d) = self.direction {
            cfg.warp.direction = match d {
                DirectionArg::Forward => Direction::Forward,
                DirectionArg::Backward => Direction::Backward,
                DirectionArg::Both => Direction::Both,
            };
        }
        if let Some(p) = self.policy {
            cfg.attention.unmatched = match p {
                PolicyArg::GlobalAttend => UnmatchedPolicy::GlobalAttend,
                PolicyArg::KeepSource => UnmatchedPolicy::KeepSource,
            };
        }
        if self.allow_gaps {
            cfg.warp.allow_gaps = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "restyle",
    version,
    about = "Semantic style transfer and multi-view style lifting"
)]
pub struct Cli {
    /// Worker threads (falls back to RESTYLE_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic multi-view scene with ground truth.
    Synth(SynthArgs),
    /// Transfer style between semantically matched regions.
    Stylize(StylizeArgs),
    /// Propagate a stylized frame through a scene.
    Lift(LiftArgs),
    /// Warp one frame into another.
    Warp(WarpArgs),
    /// Build and dump a semantic attention mask.
    InspectMask(InspectMaskArgs),
    /// Compute depth, image and pose metrics.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TrajectoryArg {
    Pan,
    Revisiting,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, value_enum, default_value = "pan")]
    pub trajectory: TrajectoryArg,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct StylizeArgs {
    /// Content scene manifest (or its directory).
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    /// Style scene manifest (or its directory).
    #[arg(long)]
    pub style: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub style_frame: usize,
    /// Class override `source=style`, repeatable.
    #[arg(long = "match", value_parser = parse_match)]
    pub matches: Vec<(String, String)>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct LiftArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed_frame: usize,
    /// Stylized seed frame raster.
    #[arg(long)]
    pub stylized: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct WarpArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub source: usize,
    #[arg(long)]
    pub target: usize,
    /// Image to warp; defaults to the source frame's own image.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct InspectMaskArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    #[arg(long)]
    pub style: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub style_frame: usize,
    #[arg(long = "match", value_parser = parse_match)]
    pub matches: Vec<(String, String)>,
    /// Grid side of the downsampled maps.
    #[arg(long, default_value_t = 8)]
    pub downsample: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, requires = "ref_depth")]
    pub pred_depth: Option<PathBuf>,
    #[arg(long, requires = "pred_depth")]
    pub ref_depth: Option<PathBuf>,
    /// JSON list of `{"R": [...9], "t": [...3]}` objects.
    #[arg(long, requires = "ref_poses")]
    pub pred_poses: Option<PathBuf>,
    #[arg(long, requires = "pred_poses")]
    pub ref_poses: Option<PathBuf>,
    /// Evaluate consecutive relative poses instead of aligned absolute poses.
    #[arg(long)]
    pub relative: bool,
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    pub images: Option<Vec<PathBuf>>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_match(s: &str) -> std::result::Result<(String, String), String> {
    match s.split_once('=') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok((a.to_string(), b.to_string())),
        _ => Err(format!("expected source=style, got {s:?}")),
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::{ContextKind, ContextValue, ErrorKind};
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    return 0;
                }
                ErrorKind::InvalidSubcommand => {
                    let name = match e.get(ContextKind::InvalidSubcommand) {
                        Some(ContextValue::String(s)) => s.clone(),
                        _ => String::new(),
                    };
                    eprintln!("error[UnknownSubcommand]: {}", CliError::UnknownSubcommand(name));
                    return 1;
                }
                _ => {
                    eprint!("{e}");
                    return 1;
                }
            }
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            e.exit_code()
        }
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = flag {
        return if n == 0 {
            Err(invalid("threads", "must be positive"))
        } else {
            Ok(Some(n))
        };
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(invalid(THREADS_ENV, format!("expected a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

/// Runs a parsed command on a pool capped at the requested thread count.
pub fn execute(cli: Cli) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count(cli.threads)? {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| invalid("threads", e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Stylize(a) => cmd_stylize(&a),
        Command::Lift(a) => cmd_lift(&a),
        Command::Warp(a) => cmd_warp(&a),
        Command::InspectMask(a) => cmd_inspect_mask(&a),
        Command::Eval(a) => cmd_eval(&a),
    })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json value serializes");
    text.push('\n');
    write_text(path, &text)
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn scene_digest(scene: &Scene) -> String {
    let mut hasher = Sha256::new();
    for f in &scene.frames {
        hasher.update(Raster::Image(f.image.clone()).to_bytes());
        hasher.update(Raster::Depth(f.depth.clone()).to_bytes());
        hasher.update(Raster::Pointmap(f.pointmap.clone()).to_bytes());
        hasher.update(Raster::Segmentation(f.segmentation.clone()).to_bytes());
        hasher.update(serde_json::to_vec(&f.pose).expect("pose serializes"));
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn open_scene(path: &Path) -> Result<Scene> {
    let manifest = if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    };
    Ok(load_scene(manifest)?)
}

fn check_frame(scene: &Scene, index: usize, flag: &str) -> Result<()> {
    if index >= scene.len() {
        return Err(CliError::Usage(format!(
            "--{flag} {index} is out of range for a {}-frame scene",
            scene.len()
        )));
    }
    Ok(())
}

fn read_image(path: &Path) -> Result<ImageBuffer> {
    match read_raster(path)? {
        Raster::Image(img) => Ok(img),
        other => Err(CliError::Usage(format!(
            "{} holds a {} raster, expected an image",
            path.display(),
            other.kind()
        ))),
    }
}

fn read_depth(path: &Path) -> Result<DepthMap> {
    match read_raster(path)? {
        Raster::Depth(d) => Ok(d),
        other => Err(CliError::Usage(format!(
            "{} holds a {} raster, expected depth",
            path.display(),
            other.kind()
        ))),
    }
}

fn mask_image(width: usize, height: usize, mask: &[bool]) -> ImageBuffer {
    let data = mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect();
    ImageBuffer::from_data(width, height, 1, data).expect("mask values are finite")
}

/// Writes `name.rsim` and `name.png`, returning both file names.
fn write_image_pair(dir: &Path, name: &str, img: &ImageBuffer) -> Result<Vec<String>> {
    let raw = format!("{name}.rsim");
    let png = format!("{name}.png");
    write_raster(&Raster::Image(img.clone()), dir.join(&raw))?;
    write_raster(&Raster::Image(img.clone()), dir.join(&png))?;
    Ok(vec![raw, png])
}

fn report(command: &str, cfg: Option<&PipelineConfig>, body: Value) -> Value {
    let mut out = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
    });
    if let Some(cfg) = cfg {
        out["config"] = serde_json::to_value(cfg).expect("config serializes");
    }
    if let (Value::Object(dst), Value::Object(src)) = (&mut out, body) {
        dst.extend(src);
    }
    out
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    if args.frames == 0 {
        return Err(invalid("frames", "must be positive"));
    }
    if !(args.noise >= 0.0 && args.noise.is_finite()) {
        return Err(invalid("noise", "must be finite and non-negative"));
    }
    let started = Instant::now();
    let mut cfg = match args.trajectory {
        TrajectoryArg::Pan => SynthConfig::pan(args.width, args.height, args.frames, args.seed),
        TrajectoryArg::Revisiting => SynthConfig::revisiting(args.width, args.height, args.frames, args.seed),
    };
    cfg.noise_level = args.noise;
    let (scene, truth) = synth_scene(&cfg, args.seed).map_err(|e| match e {
        SceneError::InvalidConfig(reason) => invalid("synth", reason),
        other => CliError::Scene(other),
    })?;
    save_scene(&scene, &args.out)?;
    let truth_dir = args.out.join("truth");
    create_dir(&truth_dir)?;
    let mut pairs = Vec::new();
    for (&(i, j), pair) in &truth.pairs {
        let name = format!("flow_{i:03}_{j:03}.rsfl");
        write_raster(&Raster::Flow(pair.flow.clone()), truth_dir.join(&name))?;
        pairs.push(json!({
            "from": i,
            "to": j,
            "file": format!("truth/{name}"),
            "covisible_fraction": pair.covisible.iter().filter(|v| **v).count() as f64 / pair.covisible.len() as f64,
        }));
    }
    let poses: Vec<CameraPose> = scene.frames.iter().map(|f| f.pose).collect();
    write_json(
        &args.out.join("poses.json"),
        &serde_json::to_value(&poses).expect("poses serialize"),
    )?;
    let body = json!({
        "frames": scene.len(),
        "width": scene.width(),
        "height": scene.height(),
        "seed": args.seed,
        "trajectory": format!("{:?}", args.trajectory).to_lowercase(),
        "noise": args.noise,
        "scene_digest": scene_digest(&scene),
        "truth": pairs,
    });
    write_json(&args.out.join("report.json"), &report("synth", None, body))?;
    write_json(
        &args.out.join("timings.json"),
        &json!({"total_seconds": started.elapsed().as_secs_f64()}),
    )?;
    log::info!("wrote {}-frame scene to {}", scene.len(), args.out.display());
    Ok(())
}

/// Guided colour-mixture denoiser whose prior is fitted to `palette`.
pub fn guided_mixture_denoiser(palette: &ImageBuffer, cfg: &PipelineConfig) -> Result<GuidedDenoiser> {
    let d = &cfg.diffusion;
    let schedule = make_schedule(d.steps, d.schedule)?;
    let gmm = GaussianMixtureModel::fit_colours(&palette.data, palette.channels, d.mixture_components)?;
    let unconditional = ConditionalGmmDenoiser::new(gmm.clone(), schedule.clone());
    let semantic = ConditionalGmmDenoiser::new(gmm.clone(), schedule.clone());
    let mut depth = ConditionalGmmDenoiser::new(gmm, schedule);
    depth.depth_shift = vec![-0.05; palette.channels];
    depth.guide_sharpness = 50.0;
    Ok(GuidedDenoiser::new(
        Arc::new(unconditional),
        Arc::new(semantic),
        Arc::new(depth),
        d.alpha,
        d.lambda_s,
        d.lambda_d,
    )?)
}

fn cmd_stylize(args: &StylizeArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let started = Instant::now();
    let scene = open_scene(&args.scene)?;
    let style = open_scene(&args.style)?;
    check_frame(&scene, args.frame, "frame")?;
    check_frame(&style, args.style_frame, "style-frame")?;
    let src_map = scene.semantic_map(args.frame);
    let style_map = style.semantic_map(args.style_frame);
    let matching = match_classes(&src_map, &style_map, &args.matches, cfg.attention.unmatched)?;
    let src_img = &scene.frames[args.frame].image;
    let style_img = &style.frames[args.style_frame].image;
    let transferred = attention::toy_semantic_transfer(
        src_img,
        style_img,
        &src_map,
        &style_map,
        &matching,
        cfg.attention.patch,
        cfg.attention.temperature,
    )?;
    let stylized = if cfg.diffusion.strength > 0.0 && transferred.channels == 3 {
        let denoiser = guided_mixture_denoiser(style_img, &cfg)?;
        let depth = normalized_depth(&scene.frames[args.frame].depth);
        let mut data = Vec::with_capacity(transferred.pixel_count() * 5);
        for (p, rgb) in transferred.data.chunks_exact(3).enumerate() {
            data.extend_from_slice(rgb);
            data.push(1.0);
            data.push(depth[p]);
        }
        let condition = RefinerCondition {
            width: transferred.width,
            height: transferred.height,
            data,
        };
        let refiner = ToyDiffusionRefiner {
            denoiser: Arc::new(denoiser),
            strength: cfg.diffusion.strength,
            reimpose: false,
        };
        refiner.refine(&condition, &mut crate::seeded_rng(cfg.seed))?
    } else {
        transferred
    };
    create_dir(&args.out)?;
    let outputs = write_image_pair(&args.out, "stylized", &stylized)?;
    let body = json!({
        "frame": args.frame,
        "style_frame": args.style_frame,
        "scene_digest": scene_digest(&scene),
        "style_digest": scene_digest(&style),
        "matching": matching.pairs,
        "outputs": outputs,
    });
    write_json(&args.out.join("report.json"), &report("stylize", Some(&cfg), body))?;
    write_json(
        &args.out.join("timings.json"),
        &json!({"total_seconds": started.elapsed().as_secs_f64()}),
    )?;
    Ok(())
}

fn cmd_lift(args: &LiftArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let started = Instant::now();
    let scene = open_scene(&args.scene)?;
    check_frame(&scene, args.seed_frame, "seed-frame")?;
    let seed_bytes = std::fs::read(&args.stylized).map_err(|source| CliError::Io {
        path: args.stylized.clone(),
        source,
    })?;
    let seed_img = read_image(&args.stylized)?;
    let refiner: Box<dyn Refiner> = match cfg.warp.refiner {
        RefinerKind::Fill => Box::new(diffusion_fill_refiner()),
        RefinerKind::Toy => Box::new(ToyDiffusionRefiner {
            denoiser: Arc::new(guided_mixture_denoiser(&seed_img, &cfg)?),
            strength: cfg.diffusion.strength,
            reimpose: cfg.diffusion.reimpose,
        }),
    };
    let mut rng = crate::seeded_rng(cfg.seed);
    let state = lift_sequence(
        &scene,
        &seed_img,
        args.seed_frame,
        refiner.as_ref(),
        cfg.lift_config(),
        &mut rng,
    )?;
    create_dir(&args.out)?;
    let mut outputs = Vec::new();
    for (i, img) in &state.stylized {
        outputs.extend(write_image_pair(&args.out, &format!("frame_{i:03}"), img)?);
    }
    for (i, mask) in &state.masks {
        let name = format!("mask_{i:03}.rsim");
        write_raster(
            &Raster::Image(mask_image(scene.width(), scene.height(), mask)),
            args.out.join(&name),
        )?;
        outputs.push(name);
    }
    let frames: Vec<Value> = state
        .reports
        .iter()
        .map(|r| {
            json!({
                "frame": r.frame,
                "sources": r.sources,
                "coverage": json_number(r.coverage),
            })
        })
        .collect();
    let body = json!({
        "seed_frame": args.seed_frame,
        "scene_digest": scene_digest(&scene),
        "stylized_digest": hex_digest(&seed_bytes),
        "frames": frames,
        "outputs": outputs,
    });
    write_json(&args.out.join("report.json"), &report("lift", Some(&cfg), body))?;
    write_json(
        &args.out.join("timings.json"),
        &json!({"total_seconds": started.elapsed().as_secs_f64()}),
    )?;
    log::info!("lifted {} frames into {}", state.stylized.len(), args.out.display());
    Ok(())
}

fn cmd_warp(args: &WarpArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let scene = open_scene(&args.scene)?;
    check_frame(&scene, args.source, "source")?;
    check_frame(&scene, args.target, "target")?;
    let image = match &args.image {
        Some(p) => read_image(p)?,
        None => scene.frames[args.source].image.clone(),
    };
    let warped = warp_frame(&scene, &image, args.source, args.target, &cfg.lift_config())?;
    create_dir(&args.out)?;
    let mut outputs = write_image_pair(&args.out, "warped", &warped.image)?;
    write_raster(
        &Raster::Image(mask_image(warped.image.width, warped.image.height, &warped.mask)),
        args.out.join("mask.rsim"),
    )?;
    write_raster(
        &Raster::Tensor(FloatRaster {
            width: warped.image.width,
            height: warped.image.height,
            channels: 1,
            data: warped.weight.iter().map(|w| *w as f32).collect(),
        }),
        args.out.join("weight.rsft"),
    )?;
    outputs.extend(["mask.rsim".to_string(), "weight.rsft".to_string()]);
    let body = json!({
        "source": args.source,
        "target": args.target,
        "scene_digest": scene_digest(&scene),
        "coverage": json_number(warped.covered_fraction()),
        "outputs": outputs,
    });
    write_json(&args.out.join("report.json"), &report("warp", Some(&cfg), body))?;
    Ok(())
}

fn cmd_inspect_mask(args: &InspectMaskArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let scene = open_scene(&args.scene)?;
    let style = open_scene(&args.style)?;
    check_frame(&scene, args.frame, "frame")?;
    check_frame(&style, args.style_frame, "style-frame")?;
    let src_map = scene.semantic_map(args.frame);
    let style_map = style.semantic_map(args.style_frame);
    let matching = match_classes(&src_map, &style_map, &args.matches, cfg.attention.unmatched)?;
    let src_small = downsample_map(&src_map, args.downsample)?;
    let style_small = downsample_map(&style_map, args.downsample)?;
    let mask = build_attention_mask(&src_small, &style_small, &matching)?;
    create_dir(&args.out)?;
    let img = mask_image(mask.cols, mask.rows, &mask.bits);
    let outputs = write_image_pair(&args.out, "mask", &img)?;
    let mut per_class: BTreeMap<String, usize> = BTreeMap::new();
    let mut global_rows = 0usize;
    for r in 0..mask.rows {
        let class = src_small.class_of(r).to_string();
        let row = mask.row(r);
        let allowed = row.iter().filter(|b| **b).count();
        let matched = matching
            .style_for(&class)
            .is_some_and(|s| (0..mask.cols).any(|c| style_small.class_of(c) == s));
        if !matched && allowed == mask.cols {
            global_rows += 1;
        }
        *per_class.entry(class).or_default() += allowed;
    }
    let body = json!({
        "rows": mask.rows,
        "cols": mask.cols,
        "allowed": mask.bits.iter().filter(|b| **b).count(),
        "allowed_by_source_class": per_class,
        "global_fallback_rows": global_rows,
        "matching": matching.pairs,
        "outputs": outputs,
    });
    let full = report("inspect-mask", Some(&cfg), body);
    write_json(&args.out.join("report.json"), &full)?;
    print_stdout(&serde_json::to_string_pretty(&full).expect("json value serializes"));
    Ok(())
}

/// Prints a line, tolerating a closed stdout.
fn print_stdout(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn read_poses(path: &Path) -> Result<Vec<CameraPose>> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut body = serde_json::Map::new();
    if let (Some(p), Some(r)) = (&args.pred_depth, &args.ref_depth) {
        let m = metrics::depth_metrics(&read_depth(p)?, &read_depth(r)?, None)?;
        body.insert(
            "depth".into(),
            json!({
                "AbsRel": json_number(m.abs_rel),
                "SqRel": json_number(m.sq_rel),
                "delta1": json_number(m.delta1),
                "valid_pixels": m.valid_pixels,
            }),
        );
    }
    if let Some(paths) = &args.images {
        let (a, b) = (read_image(&paths[0])?, read_image(&paths[1])?);
        let psnr = metrics::psnr(&a, &b, None)?;
        let mut images = json!({ "PSNR": json_number(psnr) });
        match metrics::ssim(&a, &b) {
            Ok(s) => images["SSIM"] = json_number(s),
            Err(MetricsError::TooSmall { .. }) => images["SSIM"] = Value::Null,
            Err(e) => return Err(e.into()),
        }
        body.insert("images".into(), images);
    }
    if let (Some(p), Some(r)) = (&args.pred_poses, &args.ref_poses) {
        let (est, reference) = (read_poses(p)?, read_poses(r)?);
        let errors = if args.relative {
            metrics::relative_pose_errors(&est, &reference)?
        } else {
            metrics::pose_errors(&est, &reference)?
        };
        let rep = metrics::pose_report(
            errors,
            &metrics::ROTATION_THRESHOLDS_DEG,
            &metrics::TRANSLATION_THRESHOLDS_CM,
        )?;
        let mut poses = json!({
            "mode": if args.relative { "relative" } else { "absolute" },
            "scale": json_number(rep.errors.scale),
            "rotation_deg": rep.errors.rotation_deg.iter().map(|v| json_number(*v)).collect::<Vec<_>>(),
            "translation_cm": rep.errors.translation_cm.iter().map(|v| json_number(*v)).collect::<Vec<_>>(),
        });
        for (tau, auc) in &rep.rotation_auc {
            poses[format!("rot_AUC@{tau}deg")] = json_number(*auc);
        }
        for (tau, auc) in &rep.translation_auc {
            poses[format!("trans_AUC@{tau}cm")] = json_number(*auc);
        }
        body.insert("poses".into(), poses);
    }
    if body.is_empty() {
        return Err(CliError::Usage(
            "eval needs --pred-depth/--ref-depth, --pred-poses/--ref-poses or --images".into(),
        ));
    }
    let full = report("eval", None, Value::Object(body));
    match &args.out {
        Some(out) => write_json(out, &full)?,
        None => print_stdout(&serde_json::to_string_pretty(&full).expect("json value serializes")),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        PipelineConfig::default().validate().unwrap();
    }

    #[test]
    fn lambda_violation_names_key() {
        let cfg = PipelineConfig::from_json(r#"{"diffusion": {"lambda_s": 0.7, "lambda_d": 0.7}}"#).unwrap();
        match cfg.validate() {
            Err(CliError::ConfigValidation { key, .. }) => assert!(key.contains("lambda")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_config_key_rejected() {
        assert!(matches!(
            PipelineConfig::from_json(r#"{"warp": {"betta": 3}}"#),
            Err(CliError::ConfigValidation { .. })
        ));
    }

    #[test]
    fn match_flag_parses() {
        assert_eq!(parse_match("sofa=bed"), Ok(("sofa".into(), "bed".into())));
        assert!(parse_match("sofa").is_err());
    }

    #[test]
    fn unknown_subcommand_exits_one() {
        assert_eq!(run(["restyle", "paint"]), 1);
    }
}
