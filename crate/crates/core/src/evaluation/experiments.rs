use serde::{Deserialize, Serialize};

use super::{evaluate, mean_std, EvalConfig, EvalReport};
use crate::data::{kept_count, subsample_train, Dataset, SplitSpec, SubsampleMode};
use crate::error::{Error, Result};
use crate::model::Head;
use crate::numerics::{DType, Float};
use crate::rng::derive_seed;
use crate::training::{no_observer, train, train_minibatch, TrainConfig, TrainData, TrainMode};

/// Which pipeline a train-then-evaluate run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Episodic training with the balance loss, learned scorer at test time.
    Full,
    /// Episodic training on `λ·L_CE` only, nearest centroid (squared L2) at test time.
    NoMetric,
    /// Mini-batch classification training, nearest centroid at test time.
    NoMeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoMeta,
    NoMetric,
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "no-meta" | "no_meta" => Ok(Ablation::NoMeta),
            "no-metric" | "no_metric" => Ok(Ablation::NoMetric),
            other => Err(format!("unknown ablation {other:?} (expected no-meta or no-metric)")),
        }
    }
}

impl From<Ablation> for Variant {
    fn from(a: Ablation) -> Self {
        match a {
            Ablation::NoMeta => Variant::NoMeta,
            Ablation::NoMetric => Variant::NoMetric,
        }
    }
}

fn run<F: Float>(
    base: &TrainConfig,
    dataset: &Dataset,
    split: &SplitSpec,
    variant: Variant,
    eval_cfg: &EvalConfig,
) -> Result<EvalReport> {
    let data = TrainData::new(dataset, split)?;
    let mut obs = no_observer::<F>();
    let outcome = match variant {
        Variant::Full => train(base, &data, TrainMode::Balanced, &mut obs)?,
        Variant::NoMetric => train(base, &data, TrainMode::FitOnly, &mut obs)?,
        Variant::NoMeta => train_minibatch(base, &data, &mut obs)?,
    };
    let mut cfg = eval_cfg.clone();
    if variant != Variant::Full {
        cfg.head = Head::Euclidean;
    }
    evaluate(&outcome.params, dataset, &split.unseen_pool(dataset.index()), &cfg)
}

/// Trains a fresh model on the seen classes of `split` and evaluates it on
/// the unseen ones, in the precision the configuration asks for.
pub fn train_and_evaluate(
    base: &TrainConfig,
    dataset: &Dataset,
    split: &SplitSpec,
    variant: Variant,
    eval_cfg: &EvalConfig,
) -> Result<EvalReport> {
    match base.precision {
        DType::F32 => run::<f32>(base, dataset, split, variant, eval_cfg),
        DType::F64 => run::<f64>(base, dataset, split, variant, eval_cfg),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub mean: f64,
    pub std: f64,
}

/// One full train-and-evaluate run per λ with everything else fixed. Rows
/// are ordered by λ.
pub fn sweep_lambda(
    base: &TrainConfig,
    values: &[f64],
    dataset: &Dataset,
    split: &SplitSpec,
    eval_cfg: &EvalConfig,
) -> Result<Vec<SweepRow>> {
    let bad: Vec<String> = values
        .iter()
        .filter(|v| !(0.0..=1.0).contains(*v))
        .map(|v| format!("lambda: sweep value {v} outside [0, 1]"))
        .collect();
    if !bad.is_empty() {
        return Err(Error::Config(bad));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .into_iter()
        .map(|lambda| {
            let cfg = TrainConfig { lambda, ..base.clone() };
            let rep = train_and_evaluate(&cfg, dataset, split, Variant::Full, eval_cfg)?;
            Ok(SweepRow {
                lambda,
                mean: rep.mean,
                std: rep.std,
            })
        })
        .collect()
}

/// Runs one of the two ablated pipelines.
pub fn ablate(
    mode: Ablation,
    base: &TrainConfig,
    dataset: &Dataset,
    split: &SplitSpec,
    eval_cfg: &EvalConfig,
) -> Result<EvalReport> {
    if mode == Ablation::NoMetric && base.lambda == 0.0 {
        return Err(Error::Config(vec![
            "lambda: the no-metric ablation trains on lambda·L_CE alone and needs lambda > 0".into(),
        ]));
    }
    train_and_evaluate(base, dataset, split, mode.into(), eval_cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub mode: SubsampleMode,
    pub ratio: f64,
    pub mean: f64,
    /// Over the task accuracies of every repeat.
    pub std: f64,
}

/// Training episode shape that a subsampled pool can still supply: the
/// episode width shrinks to the kept class count, the query count to what
/// the smallest kept class holds beyond the support.
fn fit_to_subsample(
    base: &TrainConfig,
    dataset: &Dataset,
    split: &SplitSpec,
    mode: SubsampleMode,
    ratio: f64,
) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    match mode {
        SubsampleMode::Categories => {
            let kept = kept_count(ratio, split.seen.len());
            cfg.ways = cfg.ways.min(kept);
            cfg.query_ways = cfg.query_ways.min(cfg.ways);
            if cfg.ways < 2 {
                return Err(Error::invalid(format!(
                    "ratio {ratio} keeps {kept} of {} seen classes, fewer than 2",
                    split.seen.len()
                )));
            }
        }
        SubsampleMode::Scenes => {
            let smallest = split
                .seen
                .iter()
                .map(|&c| {
                    let n = split
                        .visible
                        .get(&c)
                        .map_or(dataset.index().class_size(c), Vec::len);
                    kept_count(ratio, n)
                })
                .min()
                .unwrap_or(0);
            let room = smallest.saturating_sub(cfg.shots);
            if room == 0 {
                return Err(Error::invalid(format!(
                    "ratio {ratio} keeps {smallest} samples per class, too few for {} shots plus a query",
                    cfg.shots
                )));
            }
            cfg.queries = cfg.queries.min(room);
        }
    }
    Ok(cfg)
}

/// Per ratio: subsample the seen pool, train, evaluate, `repeats` times with
/// seeds `base.seed + r`. Repeat 0 at ratio 1 is the unablated run.
pub fn ratio_study(
    mode: SubsampleMode,
    ratios: &[f64],
    repeats: usize,
    base: &TrainConfig,
    dataset: &Dataset,
    split: &SplitSpec,
    eval_cfg: &EvalConfig,
) -> Result<Vec<RatioRow>> {
    if repeats == 0 {
        return Err(Error::invalid("ratio study needs at least one repeat"));
    }
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let cfg = fit_to_subsample(base, dataset, split, mode, ratio)?;
        let spec = cfg.episode_spec()?;
        let mut accs = Vec::new();
        for r in 0..repeats as u64 {
            let run_cfg = TrainConfig {
                seed: base.seed.wrapping_add(r),
                ..cfg.clone()
            };
            let sub_seed = derive_seed(run_cfg.seed, "ratio.subsample");
            let sub = subsample_train(split, dataset.index(), mode, ratio, sub_seed, &spec)?;
            let rep = train_and_evaluate(&run_cfg, dataset, &sub, Variant::Full, eval_cfg)?;
            accs.extend(rep.per_task.iter().map(|t| t.acc));
        }
        let (mean, std) = mean_std(accs);
        rows.push(RatioRow { mode, ratio, mean, std });
    }
    Ok(rows)
}
