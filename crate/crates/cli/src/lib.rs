//! `mvrestore` subcommands. Each command reads its inputs from disk, writes
//! its outputs into the given location, and reports failures as a
//! categorized single-line [`CliError`].

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mvrestore_core::config::{ConfigError, RunConfig, MAX_SEED};
use mvrestore_core::dataio::{
    generate_synthetic_scene, load_indexed_depths, load_indexed_images, load_scene, save_images, save_scene,
    write_depth, DataError, Scene, SyntheticSpec, ViewSet,
};
use mvrestore_core::degradations::{degrade_image, BlurParams, DegradationTask, DegradeError};
use mvrestore_core::diffusion::{restore, scaled_linear_schedule, CodecKind, DiffusionError, SamplerKind, SamplerSpec};
use mvrestore_core::geometry::select_view_sets;
use mvrestore_core::metrics::{
    default_perceptual_backend, depth_report, image_report, HarrisNccMatcher, MetricError, MetricReport,
    VConsisOptions,
};
use mvrestore_core::mv_unet::{ModelError, MvUnet};
use mvrestore_core::rng::sub_seed;
use mvrestore_core::trainer::{
    depth_task_decode, latest_checkpoint, DepthNormalization, TrainError, TrainState, TrainTask, Trainer, ViewLists,
};

pub mod plot;

#[derive(Debug, Parser)]
#[command(name = "mvrestore", version, about = "Multi-view diffusion restoration pipelines")]
pub struct Cli {
    /// Seed for every random draw; overrides the config seed for `train`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic scene directory.
    GenScene(GenSceneArgs),
    /// Degrade every view of a scene.
    Synth(SynthArgs),
    /// Build anchor → candidate view lists from overlap ratios.
    SelectViews(SelectViewsArgs),
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Restore a view set with a trained checkpoint.
    Restore(RestoreArgs),
    /// Score restored views against a ground-truth scene.
    Eval(EvalArgs),
    /// Draw loss curves and metric bar charts as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenSceneArgs {
    /// Output scene directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of views on the camera arc.
    #[arg(long, default_value_t = 8)]
    pub views: usize,
    #[arg(long, default_value_t = 48)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ImageTask {
    Deblur,
    Sr,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Clean scene directory.
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, value_enum)]
    pub task: ImageTask,
    /// Mean blur kernel size in pixels.
    #[arg(long, default_value_t = 9.0)]
    pub size_mean: f64,
    /// Standard deviation of the kernel size.
    #[arg(long, default_value_t = 1.35)]
    pub size_std: f64,
    /// Lower end of the trajectory intensity range.
    #[arg(long, default_value_t = 0.0)]
    pub intensity_min: f64,
    /// Upper end of the trajectory intensity range.
    #[arg(long, default_value_t = 1.0)]
    pub intensity_max: f64,
    /// Super-resolution factor.
    #[arg(long, default_value_t = 2)]
    pub factor: usize,
    /// Output scene directory (degraded images, original depth and poses).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectViewsArgs {
    /// Scene directories; repeat for several scenes.
    #[arg(long = "scene", required = true)]
    pub scenes: Vec<PathBuf>,
    /// Accepted overlap interval.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [0.6, 0.8])]
    pub range: Vec<f64>,
    /// Maximum candidates per anchor.
    #[arg(long, default_value_t = 8)]
    pub list_size: usize,
    /// Output JSON: scene id → anchor → candidates.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory for `config`, `loss.csv` and `checkpoints/`.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the latest checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplerArg {
    Ddim,
    Ancestral,
}

#[derive(Debug, Args)]
pub struct RestoreArgs {
    /// Model or training checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Scene directory holding the degraded inputs (RGB inputs for depth).
    #[arg(long)]
    pub scene: PathBuf,
    /// Comma-separated view indices; all views when omitted.
    #[arg(long, value_delimiter = ',')]
    pub views: Option<Vec<usize>>,
    /// Sampling steps.
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, value_enum, default_value_t = SamplerArg::Ddim)]
    pub sampler: SamplerArg,
    /// Clamp each clean estimate to [0, 1] during sampling.
    #[arg(long)]
    pub clip: bool,
    /// Output directory; defaults to `<scene>/restored`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalTask {
    Deblur,
    Sr,
    Depth,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub task: EvalTask,
    /// Directory of `%04d.png` (or `%04d.fdepth` for depth) predictions.
    #[arg(long)]
    pub pred_dir: PathBuf,
    /// Ground-truth scene directory.
    #[arg(long)]
    pub gt_scene: PathBuf,
    /// Report path.
    #[arg(long)]
    pub out: PathBuf,
    /// Skip per-view scale/bias alignment of depth predictions.
    #[arg(long)]
    pub no_align: bool,
    /// Skip the correspondence-count matcher.
    #[arg(long)]
    pub no_matcher: bool,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// `loss.csv` files; repeat to overlay runs.
    #[arg(long = "loss")]
    pub losses: Vec<PathBuf>,
    /// `report.json` files; one bar each.
    #[arg(long = "report")]
    pub reports: Vec<PathBuf>,
    /// Report field to chart.
    #[arg(long, default_value = "psnr")]
    pub metric: String,
    /// Output directory for `loss.svg` and `metrics.svg`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Config,
    Input,
    Io,
    Runtime,
}

impl ErrorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Usage => "usage",
            ErrorKind::Config => "config",
            ErrorKind::Input => "input",
            ErrorKind::Io => "io",
            ErrorKind::Runtime => "runtime",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage | ErrorKind::Config => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
        }
    }

    /// `error[kind]: message` on one line.
    pub fn line(&self) -> String {
        let msg: Vec<&str> = self.message.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        format!("error[{}]: {}", self.kind.as_str(), msg.join("; "))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

impl std::error::Error for CliError {}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let kind = match e {
            DataError::Io { .. } => ErrorKind::Io,
            _ => ErrorKind::Input,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let kind = match e {
            ConfigError::Io { .. } => ErrorKind::Io,
            _ => ErrorKind::Config,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let kind = match e {
            TrainError::Config(_) => ErrorKind::Config,
            TrainError::Io { .. } => ErrorKind::Io,
            TrainError::Data(_) | TrainError::NoValidSet { .. } => ErrorKind::Input,
            _ => ErrorKind::Runtime,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let kind = match e {
            ModelError::Config(_) => ErrorKind::Config,
            ModelError::Checkpoint { .. } => ErrorKind::Input,
            _ => ErrorKind::Runtime,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<DiffusionError> for CliError {
    fn from(e: DiffusionError) -> Self {
        CliError::new(ErrorKind::Runtime, e.to_string())
    }
}

impl From<DegradeError> for CliError {
    fn from(e: DegradeError) -> Self {
        CliError::new(ErrorKind::Usage, e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::new(ErrorKind::Input, e.to_string())
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(ErrorKind::Io, format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_text(path, &text)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let seed = cli.seed;
    if seed.is_some_and(|s| s > MAX_SEED) {
        return Err(CliError::new(ErrorKind::Usage, format!("--seed must be <= {MAX_SEED}")));
    }
    match cli.command {
        Command::GenScene(a) => cmd_gen_scene(&a, seed.unwrap_or(0)),
        Command::Synth(a) => cmd_synth(&a, seed.unwrap_or(0)),
        Command::SelectViews(a) => cmd_select_views(&a),
        Command::Train(a) => cmd_train(&a, seed),
        Command::Restore(a) => cmd_restore(&a, seed.unwrap_or(0)),
        Command::Eval(a) => cmd_eval(&a),
        Command::Plot(a) => plot::cmd_plot(&a),
    }
}

pub fn cmd_gen_scene(a: &GenSceneArgs, seed: u64) -> Result<(), CliError> {
    let scene = generate_synthetic_scene(&SyntheticSpec {
        n_views: a.views,
        resolution: (a.height, a.width),
        seed,
    })?;
    save_scene(&scene, &a.out)?;
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs, seed: u64) -> Result<(), CliError> {
    let task = match a.task {
        ImageTask::Deblur => DegradationTask::Deblur(BlurParams {
            size_mean: a.size_mean,
            size_std: a.size_std,
            intensity_min: a.intensity_min,
            intensity_max: a.intensity_max,
        }),
        ImageTask::Sr => DegradationTask::Sr { factor: a.factor },
    };
    let mut scene = load_scene(&a.scene)?;
    for (i, v) in scene.views.iter_mut().enumerate() {
        v.image = degrade_image(&v.image, &task, sub_seed(seed, i as u64))?.0;
    }
    save_scene(&scene, &a.out)?;
    Ok(())
}

/// Scene id → anchor → candidates.
pub type ViewSetsFile = BTreeMap<String, ViewLists>;

pub fn cmd_select_views(a: &SelectViewsArgs) -> Result<(), CliError> {
    let (lo, hi) = (a.range[0], a.range[1]);
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(CliError::new(ErrorKind::Usage, format!("--range {lo} {hi} must satisfy 0 <= LO <= HI <= 1")));
    }
    let mut out = ViewSetsFile::new();
    for dir in &a.scenes {
        let scene = load_scene(dir)?;
        if out.contains_key(&scene.scene_id) {
            return Err(CliError::new(ErrorKind::Input, format!("duplicate scene id {}", scene.scene_id)));
        }
        out.insert(scene.scene_id.clone(), select_view_sets(&scene, (lo, hi), a.list_size));
    }
    write_json(&a.out, &out)
}

fn load_viewsets(path: &Path) -> Result<ViewSetsFile, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::new(ErrorKind::Input, format!("{}: {e}", path.display())))
}

pub fn cmd_train(a: &TrainArgs, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let scenes = cfg
        .data
        .scenes
        .iter()
        .map(|p| load_scene(p))
        .collect::<Result<Vec<Scene>, _>>()?;
    let lists: Vec<ViewLists> = match &cfg.data.viewsets {
        Some(p) => {
            let file = load_viewsets(p)?;
            scenes
                .iter()
                .map(|s| {
                    file.get(&s.scene_id).cloned().ok_or_else(|| {
                        CliError::new(ErrorKind::Input, format!("{} has no entry for scene {}", p.display(), s.scene_id))
                    })
                })
                .collect::<Result<_, _>>()?
        }
        None => scenes
            .iter()
            .map(|s| select_view_sets(s, cfg.data.overlap_range, cfg.data.list_size))
            .collect(),
    };
    fs::create_dir_all(&a.out).map_err(|e| io_error(&a.out, e))?;
    write_text(&a.out.join("config"), &cfg.to_toml())?;
    let trainer = Trainer::new(&cfg.train, &scenes, &lists)?;
    let mut state = match (a.resume, latest_checkpoint(&a.out)) {
        (true, Some(ck)) => TrainState::<f32>::load(&ck)?,
        _ => TrainState::<f32>::new(&cfg.train)?,
    };
    if state.model.config != cfg.train.model {
        return Err(CliError::new(ErrorKind::Config, "checkpoint model config differs from the run config"));
    }
    trainer.run(&mut state, cfg.train.iterations, Some(&a.out), |_| {})?;
    Ok(())
}

/// The resolved config written by `train`, found from a checkpoint path
/// inside `<run>/checkpoints/`.
fn run_config_for(ckpt: &Path) -> Result<Option<RunConfig>, CliError> {
    let Some(run) = ckpt.parent().and_then(Path::parent) else {
        return Ok(None);
    };
    let path = run.join("config");
    if !path.is_file() {
        return Ok(None);
    }
    Ok(Some(RunConfig::load(&path)?))
}

pub fn cmd_restore(a: &RestoreArgs, seed: u64) -> Result<(), CliError> {
    let model = MvUnet::<f32>::load(&a.ckpt)?;
    let run = run_config_for(&a.ckpt)?;
    let (task, codec, steps) = run
        .as_ref()
        .map_or((None, CodecKind::Identity, 200), |r| (Some(r.train.task), r.train.codec, r.train.diffusion_steps));
    let sched = scaled_linear_schedule(steps)?;
    let scene = load_scene(&a.scene)?;
    let views = a.views.clone().unwrap_or_else(|| (0..scene.views.len()).collect());
    let set: ViewSet = scene.view_set(&views)?;
    let spec = SamplerSpec {
        kind: match a.sampler {
            SamplerArg::Ddim => SamplerKind::Deterministic,
            SamplerArg::Ancestral => SamplerKind::Ancestral,
        },
        n_steps: a.steps,
        seed,
        clip_denoised: a.clip,
    };
    let out_dir = a.out.clone().unwrap_or_else(|| a.scene.join("restored"));
    let restored = restore(&model, codec, &set.images, &spec, &sched)?;
    if task == Some(TrainTask::Depth) {
        // scene depth fixes the metric range when available; predictions are
        // relative otherwise
        let norm = match &set.depths {
            Some(d) if d.iter().any(|m| m.n_valid() > 0) => DepthNormalization::fit(d)?,
            _ => DepthNormalization { lo: 1.0, hi: 2.0 },
        };
        fs::create_dir_all(&out_dir).map_err(|e| io_error(&out_dir, e))?;
        for (im, i) in restored.iter().zip(&views) {
            write_depth(&out_dir.join(format!("{i:04}.fdepth")), &depth_task_decode(im, &norm))?;
        }
        write_json(&out_dir.join("normalization.json"), &norm)?;
    } else {
        save_images(&out_dir, &restored, &views)?;
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let gt_scene = load_scene(&a.gt_scene)?;
    let report: MetricReport = match a.task {
        EvalTask::Depth => {
            let preds = load_indexed_depths(&a.pred_dir)?;
            if preds.is_empty() {
                return Err(CliError::new(ErrorKind::Input, format!("no .fdepth files in {}", a.pred_dir.display())));
            }
            let idx: Vec<usize> = preds.iter().map(|p| p.0).collect();
            let gt = gt_scene.view_set(&idx)?;
            let maps: Vec<_> = preds.into_iter().map(|p| p.1).collect();
            depth_report(&maps, &gt, !a.no_align)?
        }
        EvalTask::Deblur | EvalTask::Sr => {
            let preds = load_indexed_images(&a.pred_dir)?;
            if preds.is_empty() {
                return Err(CliError::new(ErrorKind::Input, format!("no .png files in {}", a.pred_dir.display())));
            }
            let idx: Vec<usize> = preds.iter().map(|p| p.0).collect();
            let gt = gt_scene.view_set(&idx)?;
            let images: Vec<_> = preds.into_iter().map(|p| p.1).collect();
            let backend = default_perceptual_backend();
            let matcher = HarrisNccMatcher::default();
            image_report(
                &images,
                &gt,
                &backend,
                &VConsisOptions::default(),
                (!a.no_matcher).then_some(&matcher as _),
            )?
        }
    };
    write_json(&a.out, &report)
}
