//! Repeated few-shot test tasks on unseen classes, and the experiments
//! composed from training and evaluation runs.

mod experiments;
mod pca;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use experiments::{
    ablate, ratio_study, sweep_lambda, train_and_evaluate, Ablation, RatioRow, SweepRow, Variant,
};
pub use pca::{jacobi_eigen, pca_csv, pca_project, Pca, PcaRow};

use crate::config::Fields;
use crate::data::Dataset;
use crate::episodes::{episode_at, ClassPool, Episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::model::{compute_centroids, embed, head_scores, Head, ModelParams};
use crate::numerics::{BnMode, Float, Graph, Tensor};
use crate::rng::derive_seed;

/// Queries per class in a test task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum QueryCount {
    Fixed(usize),
    /// Every sample not used as support, up to the smallest class.
    Remaining(Remaining),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Remaining {
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Classes per task.
    #[serde(rename = "Q")]
    pub ways: usize,
    /// Labelled samples per class.
    #[serde(rename = "L")]
    pub shots: usize,
    #[serde(rename = "S_te")]
    pub queries: QueryCount,
    /// Number of tasks.
    #[serde(rename = "M")]
    pub tasks: usize,
    pub seed: u64,
    pub head: Head,
    /// `eval` normalizes with running statistics; `train` uses each batch's
    /// own statistics.
    pub batch_norm: BnMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ways: 5,
            shots: 1,
            queries: QueryCount::Fixed(15),
            tasks: 20,
            seed: 0,
            head: Head::Learned,
            batch_norm: BnMode::Eval,
        }
    }
}

impl EvalConfig {
    pub fn read(f: &mut Fields<'_>) -> Self {
        let d = Self::default();
        let queries = match f.allow("S_te") {
            None => d.queries,
            Some(Value::String(s)) if s == "all" => QueryCount::Remaining(Remaining::All),
            Some(v) => match v.as_u64() {
                Some(n) => QueryCount::Fixed(n as usize),
                None => {
                    f.fail(format!("S_te: expected a positive integer or \"all\", got {v}"));
                    d.queries
                }
            },
        };
        let c = Self {
            ways: f.usize("Q", d.ways),
            shots: f.usize("L", d.shots),
            queries,
            tasks: f.usize("M", d.tasks),
            seed: f.u64("seed", d.seed),
            head: f.parsed("head", d.head),
            batch_norm: f.parsed("batch_norm", d.batch_norm),
        };
        f.check(c.ways >= 2, "Q", "needs at least 2 classes per task");
        f.check(c.shots >= 1, "L", "must be at least 1");
        f.check(c.queries != QueryCount::Fixed(0), "S_te", "must be at least 1");
        f.check(c.tasks >= 1, "M", "must be at least 1");
        c
    }

    pub fn from_json(value: &Value) -> Result<Self> {
        let mut f = Fields::new(value)?;
        let c = Self::read(&mut f);
        f.finish()?;
        Ok(c)
    }

    /// Episode shape of a task drawn from `pool`.
    pub fn episode_spec(&self, pool: &ClassPool) -> Result<EpisodeSpec> {
        let queries = match self.queries {
            QueryCount::Fixed(n) => n,
            QueryCount::Remaining(_) => pool.min_class_size().saturating_sub(self.shots),
        };
        if queries == 0 {
            return Err(Error::Episode(format!(
                "no samples remain for queries after {} labelled per class",
                self.shots
            )));
        }
        EpisodeSpec::new(self.ways, self.shots, self.ways, queries)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample: usize,
    /// Task-local true label.
    pub label: usize,
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    /// Correctly classified queries.
    pub r: usize,
    pub acc: f64,
    /// Global class id of each task-local label.
    pub classes: Vec<usize>,
    pub predictions: Vec<Prediction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub per_task: Vec<TaskResult>,
    pub mean: f64,
    /// Population standard deviation of the per-task accuracies.
    pub std: f64,
    /// Row-normalized task-local confusion counts: row = true, column = predicted.
    pub confusion: Vec<Vec<f64>>,
    /// Confusion rows that received no queries (left at zero).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub empty_rows: Vec<usize>,
}

impl EvalReport {
    /// Aggregates task results.
    pub fn from_tasks(config: EvalConfig, per_task: Vec<TaskResult>) -> Self {
        let q = config.ways;
        let mut counts = vec![vec![0usize; q]; q];
        for p in per_task.iter().flat_map(|t| &t.predictions) {
            counts[p.label][p.predicted] += 1;
        }
        let mut empty_rows = Vec::new();
        let confusion = counts
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    empty_rows.push(i);
                    vec![0.0; q]
                } else {
                    row.iter().map(|&c| c as f64 / n as f64).collect()
                }
            })
            .collect();
        let (mean, std) = mean_std(per_task.iter().map(|t| t.acc));
        Self {
            config,
            per_task,
            mean,
            std,
            confusion,
            empty_rows,
        }
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<F: PartialOrd>(row: &[F]) -> usize {
    (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
}

/// Embeds samples in batches of at most `chunk` images.
pub fn embed_samples<F: Float>(
    params: &ModelParams<F>,
    dataset: &Dataset,
    ids: &[usize],
    mode: BnMode,
) -> Result<Tensor<F>> {
    const CHUNK: usize = 128;
    let mut rows = Vec::with_capacity(ids.len() * params.config().embed_dim());
    let chunks: Vec<&[usize]> = if mode == BnMode::Train {
        vec![ids]
    } else {
        ids.chunks(CHUNK).collect()
    };
    for part in chunks {
        let mut g = Graph::inference();
        let bound = params.bind(&mut g);
        let x = g.constant(dataset.batch::<F>(part)?);
        let (v, _) = embed(&mut g, params, &bound, x, mode)?;
        rows.extend_from_slice(g.value(v).data());
    }
    Tensor::new(vec![ids.len(), params.config().embed_dim()], rows)
}

/// Classifies the queries of one task.
pub fn run_task<F: Float>(
    params: &ModelParams<F>,
    dataset: &Dataset,
    episode: &Episode,
    head: Head,
    mode: BnMode,
) -> Result<TaskResult> {
    let support = embed_samples(params, dataset, &episode.support_ids(), mode)?;
    let queries = embed_samples(params, dataset, &episode.query_ids(), mode)?;
    let centroids = compute_centroids(&support, &episode.support_labels())?;
    let scores = head_scores(params, head, &queries, &centroids)?;
    let mut predictions = Vec::with_capacity(episode.query.len());
    for (i, q) in episode.query.iter().enumerate() {
        // Lowest score is the most likely class.
        let neg: Vec<F> = scores.row(i).iter().map(|&s| -s).collect();
        predictions.push(Prediction {
            sample: q.sample,
            label: q.label,
            predicted: argmax(&neg),
        });
    }
    let r = predictions.iter().filter(|p| p.label == p.predicted).count();
    Ok(TaskResult {
        r,
        acc: r as f64 / predictions.len() as f64,
        classes: episode.class_map.clone(),
        predictions,
    })
}

/// Seed of the test task stream.
pub fn task_seed(seed: u64) -> u64 {
    derive_seed(seed, "eval.tasks")
}

/// Runs `cfg.tasks` test tasks drawn from `pool`.
pub fn evaluate<F: Float>(
    params: &ModelParams<F>,
    dataset: &Dataset,
    pool: &ClassPool,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let spec = cfg.episode_spec(pool)?;
    let seed = task_seed(cfg.seed);
    let mut tasks = Vec::with_capacity(cfg.tasks);
    for i in 0..cfg.tasks {
        let episode = episode_at(pool, &spec, seed, i)?;
        tasks.push(run_task(params, dataset, &episode, cfg.head, cfg.batch_norm)?);
    }
    Ok(EvalReport::from_tasks(cfg.clone(), tasks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn task(r: usize, n: usize) -> TaskResult {
        TaskResult {
            r,
            acc: r as f64 / n as f64,
            classes: vec![],
            predictions: vec![],
        }
    }

    #[test]
    fn mean_of_task_accuracies() {
        let rep = EvalReport::from_tasks(EvalConfig::default(), vec![task(8, 10), task(6, 10)]);
        assert!((rep.mean - 0.7).abs() < 1e-15);
        assert!((rep.std - 0.1).abs() < 1e-15);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn confusion_rows_normalized_and_empty_flagged() {
        let mut cfg = EvalConfig::default();
        cfg.ways = 3;
        let p = |label, predicted| Prediction {
            sample: 0,
            label,
            predicted,
        };
        let t = TaskResult {
            r: 2,
            acc: 2.0 / 3.0,
            classes: vec![],
            predictions: vec![p(0, 0), p(0, 1), p(1, 1)],
        };
        let rep = EvalReport::from_tasks(cfg, vec![t]);
        assert_eq!(rep.confusion[0], vec![0.5, 0.5, 0.0]);
        assert_eq!(rep.confusion[1], vec![0.0, 1.0, 0.0]);
        assert_eq!(rep.empty_rows, vec![2]);
    }

    #[test]
    fn config_parsing() {
        let c = EvalConfig::from_json(&json!({"L": 5, "S_te": "all", "head": "cosine"})).unwrap();
        assert_eq!(c.shots, 5);
        assert_eq!(c.queries, QueryCount::Remaining(Remaining::All));
        assert_eq!(c.head, Head::Cosine);
        let err = EvalConfig::from_json(&json!({"M": 0, "head": "manhattan", "extra": 1})).unwrap_err();
        let s = err.to_string();
        assert!(s.contains("M:") && s.contains("head") && s.contains("extra"), "{s}");
    }
}
