//! The `emeta` command line. Each invocation is resolved into a [`Job`],
//! recorded in `manifest.json` under `--out`, then executed; `rerun` replays
//! the job of an existing manifest into a new directory.

mod job;
mod manifest;
mod settings;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::{json, Value};

use episodic_metric::data::SplitSpec;
use episodic_metric::evaluation::{Ablation, EvalConfig};
use episodic_metric::model::Head;
use episodic_metric::numerics::{BnMode, DType};
use episodic_metric::Error;

pub use job::{
    ImageFormat, Job, SweepKind, CHECKPOINT, EVAL_REPORT, MANIFEST, PCA_TABLE, SPLIT, SWEEP_TABLE, TRAIN_LOG,
};
pub use manifest::RunManifest;
pub use settings::{RunConfig, SplitConfig};

#[derive(Debug, Parser)]
#[command(name = "emeta", version, about = "Episodic metric learning for few-shot image classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic texture dataset, one folder per class.
    GenData(GenDataArgs),
    /// Write the class split and an untrained checkpoint.
    Init(TrainArgs),
    /// Train on the seen classes of a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on few-shot tasks over the unseen classes.
    Eval(EvalArgs),
    /// Train and evaluate once per value of λ or of a training ratio.
    Sweep(SweepArgs),
    /// Train and evaluate an ablated pipeline.
    Ablate(AblateArgs),
    /// Project unseen-class embeddings onto their two leading principal axes.
    ExportPca(PcaArgs),
    /// Execute the job recorded in a manifest again.
    Rerun(RerunArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Directory for every artifact of the run.
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub classes: usize,
    #[arg(long)]
    pub per_class: usize,
    /// Image height and width in pixels.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = ImageFormat::Ppm)]
    pub format: ImageFormat,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory laid out as `<class>/<image>`.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Class split to use; defaults to `split.json` next to the checkpoint.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Resize images to `H,W` on load, as the training run did.
    #[arg(long, value_parser = parse_image_size)]
    pub image_size: Option<[usize; 2]>,
    #[arg(long, default_value = "f32")]
    pub precision: DType,
}

fn parse_image_size(s: &str) -> Result<[usize; 2], String> {
    let parsed = s
        .split_once(',')
        .and_then(|(h, w)| Some([h.trim().parse().ok()?, w.trim().parse().ok()?]));
    match parsed {
        Some([h, w]) if h > 0 && w > 0 => Ok([h, w]),
        _ => Err(format!("expected two positive extents H,W, got {s:?}")),
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub source: CheckpointArgs,
    /// Classes per task (Q).
    #[arg(long, default_value_t = 5)]
    pub ways: usize,
    /// Labelled samples per class (L).
    #[arg(long, default_value_t = 1)]
    pub shots: usize,
    /// Queries per class, or `all` for every remaining sample.
    #[arg(long, default_value = "15")]
    pub queries: String,
    /// Number of tasks (M).
    #[arg(long, default_value_t = 20)]
    pub tasks: usize,
    #[arg(long, default_value = "learned")]
    pub head: Head,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "eval")]
    pub batch_norm: BnMode,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub what: SweepKind,
    /// Comma-separated values; λ defaults to 0, 0.1, ..., 1 and ratios to
    /// 0.2, 0.5, 0.8.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<f64>>,
    /// Training runs averaged per ratio.
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// `no-meta` or `no-metric`.
    #[arg(long)]
    pub mode: Ablation,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    #[command(flatten)]
    pub source: CheckpointArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or an unusable output directory.
    Usage(String),
    Core(Error),
}

/// A failed command, with the subcommand name as context.
#[derive(Debug)]
pub struct CliError {
    pub command: &'static str,
    pub failure: Failure,
}

impl CliError {
    /// 2 for usage and configuration errors, 3 for data errors, 4 for
    /// numeric failures.
    pub fn exit_code(&self) -> u8 {
        match &self.failure {
            Failure::Usage(_) => 2,
            Failure::Core(e) => match e {
                Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_) => 2,
                Error::NonFinite { .. } => 4,
                Error::Shape(_) | Error::Data { .. } | Error::Episode(_) | Error::Format(_) | Error::Io(_) => 3,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.failure {
            Failure::Usage(m) => write!(f, "{}: {m}", self.command),
            Failure::Core(Error::Config(errs)) => {
                write!(f, "{}: invalid configuration", self.command)?;
                for e in errs {
                    write!(f, "\n  {e}")?;
                }
                Ok(())
            }
            Failure::Core(e) => write!(f, "{}: {e}", self.command),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure::Usage(message.into())
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Init(_) => "init",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Sweep(_) => "sweep",
            Command::Ablate(_) => "ablate",
            Command::ExportPca(_) => "export-pca",
            Command::Rerun(_) => "rerun",
        }
    }

    fn out(&self) -> &OutArgs {
        match self {
            Command::GenData(a) => &a.out,
            Command::Init(a) | Command::Train(a) => &a.out,
            Command::Eval(a) => &a.out,
            Command::Sweep(a) => &a.train.out,
            Command::Ablate(a) => &a.train.out,
            Command::ExportPca(a) => &a.out,
            Command::Rerun(a) => &a.out,
        }
    }

    /// Validates the arguments and expands them into a job. Nothing is
    /// written.
    pub fn resolve(&self) -> Result<Job, Failure> {
        Ok(match self {
            Command::GenData(a) => {
                if a.classes < 2 {
                    return Err(usage(format!("--classes must be at least 2, got {}", a.classes)));
                }
                if a.per_class < 1 || a.size < 1 {
                    return Err(usage("--per-class and --size must be positive"));
                }
                Job::GenData {
                    classes: a.classes,
                    per_class: a.per_class,
                    size: a.size,
                    seed: a.seed,
                    format: a.format,
                }
            }
            Command::Init(a) => {
                let (data, config) = resolve_training(a)?;
                Job::Init { data, config }
            }
            Command::Train(a) => {
                let (data, config) = resolve_training(a)?;
                Job::Train { data, config }
            }
            Command::Eval(a) => {
                let queries = match a.queries.as_str() {
                    "all" => json!("all"),
                    q => json!(q
                        .parse::<u64>()
                        .map_err(|_| usage(format!("--queries must be a count or \"all\", got {q:?}")))?),
                };
                let eval = EvalConfig::from_json(&json!({
                    "Q": a.ways,
                    "L": a.shots,
                    "S_te": queries,
                    "M": a.tasks,
                    "seed": a.seed,
                    "head": a.head,
                    "batch_norm": a.batch_norm,
                }))?;
                let (checkpoint, data, split, image_size) = resolve_source(&a.source)?;
                Job::Eval {
                    checkpoint,
                    data,
                    split,
                    image_size,
                    precision: a.source.precision,
                    eval,
                }
            }
            Command::Sweep(a) => {
                let (data, config) = resolve_training(&a.train)?;
                if a.repeats == 0 {
                    return Err(usage("--repeats must be at least 1"));
                }
                let values = a.values.clone().unwrap_or_else(|| a.what.default_values());
                if values.is_empty() {
                    return Err(usage("--values is empty"));
                }
                Job::Sweep {
                    what: a.what,
                    values,
                    repeats: a.repeats,
                    data,
                    config,
                }
            }
            Command::Ablate(a) => {
                let (data, config) = resolve_training(&a.train)?;
                if a.mode == Ablation::NoMetric && config["lambda"].as_f64() == Some(0.0) {
                    return Err(Error::Config(vec![
                        "lambda: the no-metric ablation trains on lambda·L_CE alone and needs lambda > 0".into(),
                    ])
                    .into());
                }
                Job::Ablate {
                    mode: a.mode,
                    data,
                    config,
                }
            }
            Command::ExportPca(a) => {
                let (checkpoint, data, split, image_size) = resolve_source(&a.source)?;
                Job::ExportPca {
                    checkpoint,
                    data,
                    split,
                    image_size,
                    precision: a.source.precision,
                }
            }
            Command::Rerun(a) => {
                let m = RunManifest::read(&a.manifest)?;
                if m.version != env!("CARGO_PKG_VERSION") {
                    warn!(
                        "manifest was written by version {}, running {}",
                        m.version,
                        env!("CARGO_PKG_VERSION")
                    );
                }
                m.job
            }
        })
    }
}

fn existing(path: &Path, what: &str) -> Result<PathBuf, Failure> {
    fs::canonicalize(path).map_err(|e| usage(format!("{what} {}: {e}", path.display())))
}

fn resolve_training(a: &TrainArgs) -> Result<(PathBuf, Value), Failure> {
    let data = existing(&a.data, "--data")?;
    let raw = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("--config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(Error::from)?
        }
        None => json!({}),
    };
    let cfg = RunConfig::from_json(&raw)?;
    cfg.train.validate()?;
    Ok((data, cfg.to_json()))
}

type Source = (PathBuf, PathBuf, SplitSpec, Option<[usize; 2]>);

fn resolve_source(a: &CheckpointArgs) -> Result<Source, Failure> {
    let checkpoint = existing(&a.checkpoint, "--checkpoint")?;
    let data = existing(&a.data, "--data")?;
    let split_path = match &a.split {
        Some(p) => p.clone(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(SPLIT),
    };
    let text = fs::read_to_string(&split_path).map_err(|e| usage(format!("split {}: {e}", split_path.display())))?;
    let split: SplitSpec = serde_json::from_str(&text).map_err(Error::from)?;
    Ok((checkpoint, data, split, a.image_size))
}

/// Prepares `out`, creating it when missing. A non-empty directory needs
/// `force`.
fn prepare_out(out: &OutArgs) -> Result<PathBuf, Failure> {
    let dir = &out.out;
    if dir.exists() {
        if !dir.is_dir() {
            return Err(usage(format!("--out {} is not a directory", dir.display())));
        }
        let non_empty = fs::read_dir(dir).map_err(Error::from)?.next().is_some();
        if non_empty && !out.force {
            return Err(usage(format!(
                "--out {} is not empty (pass --force to write into it)",
                dir.display()
            )));
        }
    } else {
        fs::create_dir_all(dir).map_err(Error::from)?;
    }
    Ok(fs::canonicalize(dir).map_err(Error::from)?)
}

/// Runs one command: resolve, record the manifest, execute, print.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let command = cli.command.name();
    run_command(&cli.command).map_err(|failure| CliError { command, failure })
}

fn run_command(cmd: &Command) -> Result<(), Failure> {
    let job = cmd.resolve()?;
    let out = prepare_out(cmd.out())?;
    let mut manifest = RunManifest::new(job, out.clone());
    manifest.write(&out.join(MANIFEST))?;
    info!("{} -> {}", manifest.job.name(), out.display());
    let printed = manifest.job.execute(&out)?;
    manifest.finished_unix = Some(manifest::unix_now());
    manifest.write(&out.join(MANIFEST))?;
    if let Some(text) = printed {
        print!("{text}");
    }
    Ok(())
}
