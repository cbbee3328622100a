//! Fully resolved commands. A [`Job`] holds absolute paths and every
//! setting with its default filled in, so executing the same job into a
//! fresh directory reproduces the same artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use episodic_metric::data::{generate_synthetic, load_directory, Dataset, LoadOptions, SplitSpec, SubsampleMode};
use episodic_metric::evaluation::{
    ablate, embed_samples, evaluate, pca_csv, pca_project, ratio_study, sweep_lambda, Ablation, EvalConfig,
};
use episodic_metric::model::{load_checkpoint, save_checkpoint, ModelParams};
use episodic_metric::numerics::{BnMode, DType, Float};
use episodic_metric::training::{train, TrainData, TrainLogRecord, TrainMode};
use episodic_metric::Result;

use crate::settings::RunConfig;

pub const MANIFEST: &str = "manifest.json";
pub const SPLIT: &str = "split.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const CHECKPOINT: &str = "model.mmck";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const SWEEP_TABLE: &str = "sweep.csv";
pub const PCA_TABLE: &str = "pca.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Ppm,
    Mmtn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    Lambda,
    RatioCategories,
    RatioScenes,
}

impl SweepKind {
    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepKind::Lambda => (0..=10).map(|i| i as f64 / 10.0).collect(),
            SweepKind::RatioCategories | SweepKind::RatioScenes => vec![0.2, 0.5, 0.8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Job {
    GenData {
        classes: usize,
        per_class: usize,
        size: usize,
        seed: u64,
        format: ImageFormat,
    },
    /// Writes the split and an untrained checkpoint.
    Init { data: PathBuf, config: Value },
    Train { data: PathBuf, config: Value },
    Eval {
        checkpoint: PathBuf,
        data: PathBuf,
        split: SplitSpec,
        image_size: Option<[usize; 2]>,
        precision: DType,
        eval: EvalConfig,
    },
    Sweep {
        what: SweepKind,
        values: Vec<f64>,
        repeats: usize,
        data: PathBuf,
        config: Value,
    },
    Ablate { mode: Ablation, data: PathBuf, config: Value },
    ExportPca {
        checkpoint: PathBuf,
        data: PathBuf,
        split: SplitSpec,
        image_size: Option<[usize; 2]>,
        precision: DType,
    },
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::GenData { .. } => "gen-data",
            Job::Init { .. } => "init",
            Job::Train { .. } => "train",
            Job::Eval { .. } => "eval",
            Job::Sweep { .. } => "sweep",
            Job::Ablate { .. } => "ablate",
            Job::ExportPca { .. } => "export-pca",
        }
    }

    /// The root seed, when the job has one.
    pub fn seed(&self) -> Option<u64> {
        match self {
            Job::GenData { seed, .. } => Some(*seed),
            Job::Eval { eval, .. } => Some(eval.seed),
            Job::Init { config, .. }
            | Job::Train { config, .. }
            | Job::Sweep { config, .. }
            | Job::Ablate { config, .. } => config.get("seed").and_then(Value::as_u64),
            Job::ExportPca { .. } => None,
        }
    }

    /// Runs the job, writing its artifacts into `out`. Returns the text the
    /// command prints on stdout.
    pub fn execute(&self, out: &Path) -> Result<Option<String>> {
        match self {
            Job::GenData {
                classes,
                per_class,
                size,
                seed,
                format,
            } => {
                let ds = generate_synthetic(*classes, *per_class, [3, *size, *size], *seed)?;
                match format {
                    ImageFormat::Ppm => ds.write_ppm_dir(out)?,
                    ImageFormat::Mmtn => ds.write_mmtn_dir(out)?,
                }
                info!("wrote {} images in {} classes", ds.samples().len(), ds.num_classes());
                Ok(None)
            }
            Job::Init { data, config } | Job::Train { data, config } => {
                let cfg = RunConfig::from_json(config)?;
                let ds = load(data, cfg.image_size)?;
                let split = cfg.split.split(ds.index(), cfg.train.seed, cfg.train.ways)?;
                write_json(&out.join(SPLIT), &split)?;
                let init_only = matches!(self, Job::Init { .. });
                match cfg.train.precision {
                    DType::F32 => run_training::<f32>(&cfg, &ds, &split, out, init_only)?,
                    DType::F64 => run_training::<f64>(&cfg, &ds, &split, out, init_only)?,
                }
                Ok(None)
            }
            Job::Eval {
                checkpoint,
                data,
                split,
                image_size,
                precision,
                eval,
            } => {
                let ds = load(data, *image_size)?;
                split.validate(ds.index())?;
                let report = match precision {
                    DType::F32 => evaluate_checkpoint::<f32>(checkpoint, &ds, split, eval)?,
                    DType::F64 => evaluate_checkpoint::<f64>(checkpoint, &ds, split, eval)?,
                };
                write_report(out, report).map(Some)
            }
            Job::Sweep {
                what,
                values,
                repeats,
                data,
                config,
            } => {
                let cfg = RunConfig::from_json(config)?;
                let ds = load(data, cfg.image_size)?;
                let split = cfg.split.split(ds.index(), cfg.train.seed, cfg.train.ways)?;
                write_json(&out.join(SPLIT), &split)?;
                let table = match what {
                    SweepKind::Lambda => {
                        let rows = sweep_lambda(&cfg.train, values, &ds, &split, &cfg.eval)?;
                        let mut s = String::from("lambda,mean,std\n");
                        for r in rows {
                            s.push_str(&format!("{},{},{}\n", r.lambda, r.mean, r.std));
                        }
                        s
                    }
                    SweepKind::RatioCategories | SweepKind::RatioScenes => {
                        let mode = if *what == SweepKind::RatioCategories {
                            SubsampleMode::Categories
                        } else {
                            SubsampleMode::Scenes
                        };
                        let rows = ratio_study(mode, values, *repeats, &cfg.train, &ds, &split, &cfg.eval)?;
                        let mut s = String::from("mode,ratio,mean,std\n");
                        for r in rows {
                            let mode = serde_json::to_value(r.mode)?;
                            s.push_str(&format!("{},{},{},{}\n", mode.as_str().unwrap_or(""), r.ratio, r.mean, r.std));
                        }
                        s
                    }
                };
                fs::write(out.join(SWEEP_TABLE), &table)?;
                Ok(Some(table))
            }
            Job::Ablate { mode, data, config } => {
                let cfg = RunConfig::from_json(config)?;
                let ds = load(data, cfg.image_size)?;
                let split = cfg.split.split(ds.index(), cfg.train.seed, cfg.train.ways)?;
                write_json(&out.join(SPLIT), &split)?;
                let report = ablate(*mode, &cfg.train, &ds, &split, &cfg.eval)?;
                write_report(out, report.to_json_pretty()?).map(Some)
            }
            Job::ExportPca {
                checkpoint,
                data,
                split,
                image_size,
                precision,
            } => {
                let ds = load(data, *image_size)?;
                split.validate(ds.index())?;
                let csv = match precision {
                    DType::F32 => export_pca::<f32>(checkpoint, &ds, split)?,
                    DType::F64 => export_pca::<f64>(checkpoint, &ds, split)?,
                };
                fs::write(out.join(PCA_TABLE), &csv)?;
                Ok(None)
            }
        }
    }
}

pub fn load(data: &Path, image_size: Option<[usize; 2]>) -> Result<Dataset> {
    let ds = load_directory(
        data,
        LoadOptions {
            resize: image_size.map(|[h, w]| (h, w)),
        },
    )?;
    info!(
        "loaded {} images in {} classes from {}",
        ds.samples().len(),
        ds.num_classes(),
        data.display()
    );
    Ok(ds)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_report(out: &Path, mut json: String) -> Result<String> {
    if !json.ends_with('\n') {
        json.push('\n');
    }
    fs::write(out.join(EVAL_REPORT), &json)?;
    Ok(json)
}

fn run_training<F: Float>(
    cfg: &RunConfig,
    ds: &Dataset,
    split: &SplitSpec,
    out: &Path,
    init_only: bool,
) -> Result<()> {
    let data = TrainData::new(ds, split)?;
    let ckpt = out.join(CHECKPOINT);
    if init_only {
        let params = ModelParams::<F>::init(data.model_config(), cfg.train.seed)?;
        return save_checkpoint(&ckpt, &params);
    }
    let mut log = BufWriter::new(File::create(out.join(TRAIN_LOG))?);
    writeln!(log, "{}", TrainLogRecord::CSV_HEADER)?;
    let total = cfg.train.episodes;
    let per_epoch = cfg.train.episodes_per_epoch.max(1);
    let every = cfg.checkpoint_every;
    let mut observer = |r: &TrainLogRecord, p: &ModelParams<F>| -> Result<()> {
        writeln!(log, "{}", r.csv_row())?;
        let done = r.episode + 1;
        if done % per_epoch == 0 || done == total {
            info!(
                "episode {done}/{total}: l_bal {:.4} l_g {:.4} l_ce {:.4} acc {:.3} lr {}",
                r.l_bal, r.l_g, r.l_ce, r.episode_acc, r.lr
            );
        }
        if every > 0 && done % every == 0 && done < total {
            log.flush()?;
            save_checkpoint(&ckpt, p)?;
        }
        Ok(())
    };
    let outcome = train(&cfg.train, &data, TrainMode::Balanced, &mut observer)?;
    log.flush()?;
    save_checkpoint(&ckpt, &outcome.params)
}

fn evaluate_checkpoint<F: Float>(checkpoint: &Path, ds: &Dataset, split: &SplitSpec, eval: &EvalConfig) -> Result<String> {
    let params = load_checkpoint::<F>(checkpoint, ds.image_shape(), None)?;
    let report = evaluate(&params, ds, &split.unseen_pool(ds.index()), eval)?;
    info!("accuracy {:.4} ± {:.4} over {} tasks", report.mean, report.std, eval.tasks);
    report.to_json_pretty()
}

fn export_pca<F: Float>(checkpoint: &Path, ds: &Dataset, split: &SplitSpec) -> Result<String> {
    let params = load_checkpoint::<F>(checkpoint, ds.image_shape(), None)?;
    let (ids, labels): (Vec<usize>, Vec<usize>) = split.unseen_pool(ds.index()).all_samples().into_iter().unzip();
    let features = embed_samples(&params, ds, &ids, BnMode::Eval)?;
    let pca = pca_project(&features, &labels)?;
    Ok(pca_csv(&pca.rows))
}
