//! Episodic training with the balance loss, plus the mini-batch baseline.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;
use serde_json::Value;

use crate::config::Fields;
use crate::data::{Dataset, SplitSpec};
use crate::episodes::{episode_at, ClassPool, Episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::model::{
    centroids_var, compute_centroids, embed, head_scores, pair_scores, posterior_from_scores, Head, ModelConfig,
    ModelParams,
};
use crate::numerics::{BnMode, DType, Float, Graph, ParamKind, ParamStore, Tensor, Var};
use crate::objective::{balance_loss, fit_loss, generalization_loss, log_posteriors, LossConfig};
use crate::rng::{derive_seed, indexed_rng};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    #[serde(rename = "C")]
    pub ways: usize,
    #[serde(rename = "S_tr")]
    pub shots: usize,
    #[serde(rename = "Q")]
    pub query_ways: usize,
    #[serde(rename = "S_te")]
    pub queries: usize,
    pub lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    #[serde(rename = "T")]
    pub episodes: usize,
    pub episodes_per_epoch: usize,
    /// 0 disables the step schedule.
    pub lr_decay_every_epochs: usize,
    pub lr_decay_factor: f64,
    pub seed: u64,
    pub precision: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ways: 5,
            shots: 1,
            query_ways: 5,
            queries: 15,
            lambda: 0.1,
            lr: 0.001,
            weight_decay: 0.0005,
            momentum: 0.9,
            episodes: 10_000,
            episodes_per_epoch: 100,
            lr_decay_every_epochs: 20,
            lr_decay_factor: 0.5,
            seed: 0,
            precision: DType::F32,
        }
    }
}

impl TrainConfig {
    /// Reads the training keys from `f`, recording violations there.
    pub fn read(f: &mut Fields<'_>) -> Self {
        let d = Self::default();
        let c = Self {
            ways: f.usize("C", d.ways),
            shots: f.usize("S_tr", d.shots),
            query_ways: f.usize("Q", d.query_ways),
            queries: f.usize("S_te", d.queries),
            lambda: f.f64("lambda", d.lambda),
            lr: f.f64("lr", d.lr),
            weight_decay: f.f64("weight_decay", d.weight_decay),
            momentum: f.f64("momentum", d.momentum),
            episodes: f.usize("T", d.episodes),
            episodes_per_epoch: f.usize("episodes_per_epoch", d.episodes_per_epoch),
            lr_decay_every_epochs: f.usize("lr_decay_every_epochs", d.lr_decay_every_epochs),
            lr_decay_factor: f.f64("lr_decay_factor", d.lr_decay_factor),
            seed: f.u64("seed", d.seed),
            precision: f.parsed("precision", d.precision),
        };
        c.check(f);
        c
    }

    fn check(&self, f: &mut Fields<'_>) {
        f.check(self.ways >= 2, "C", "needs at least 2 classes per episode");
        f.check(self.shots >= 1, "S_tr", "must be at least 1");
        f.check(
            self.query_ways >= 1 && self.query_ways <= self.ways,
            "Q",
            format!("must be in 1..={}", self.ways),
        );
        f.check(self.queries >= 1, "S_te", "must be at least 1");
        f.check((0.0..=1.0).contains(&self.lambda), "lambda", "must be in [0, 1]");
        f.check(self.lr.is_finite() && self.lr >= 0.0, "lr", "must be a finite non-negative number");
        f.check(self.weight_decay >= 0.0, "weight_decay", "must be non-negative");
        f.check((0.0..1.0).contains(&self.momentum), "momentum", "must be in [0, 1)");
        f.check(self.episodes >= 1, "T", "must be at least 1");
        f.check(self.episodes_per_epoch >= 1, "episodes_per_epoch", "must be at least 1");
        f.check(
            self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0,
            "lr_decay_factor",
            "must be in (0, 1]",
        );
    }

    /// Parses a strict JSON object of training keys.
    pub fn from_json(value: &Value) -> Result<Self> {
        let mut f = Fields::new(value)?;
        let c = Self::read(&mut f);
        f.finish()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        Self::from_json(&serde_json::to_value(self)?).map(|_| ())
    }

    pub fn episode_spec(&self) -> Result<EpisodeSpec> {
        EpisodeSpec::new(self.ways, self.shots, self.query_ways, self.queries)
    }

    pub fn loss(&self) -> Result<LossConfig> {
        LossConfig::new(self.lambda)
    }

    /// Learning rate for 0-based episode `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        if self.lr_decay_every_epochs == 0 {
            return self.lr;
        }
        let period = self.episodes_per_epoch * self.lr_decay_every_epochs;
        self.lr * self.lr_decay_factor.powi((t / period) as i32)
    }
}

/// Objective minimized per episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// `L_g + λ·L_CE` through the learned scorer.
    Balanced,
    /// `λ·L_CE` alone; the scorer is never trained.
    FitOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainLogRecord {
    pub episode: usize,
    pub l_bal: f64,
    pub l_g: f64,
    pub l_ce: f64,
    pub episode_acc: f64,
    pub lr: f64,
    pub ms: f64,
}

impl TrainLogRecord {
    pub const CSV_HEADER: &'static str = "episode,l_bal,l_g,l_ce,episode_acc,lr,ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.episode, self.l_bal, self.l_g, self.l_ce, self.episode_acc, self.lr, self.ms
        )
    }
}

/// SGD with heavy-ball momentum and L2 decay added to the step:
/// `v ← μv + g`, `p ← p − lr·(v + wd·p)`. Batch-norm scales and shifts are
/// not decayed and buffers are never touched.
#[derive(Clone, Debug)]
pub struct Sgd<F> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<F>>>,
}

impl<F: Float> Sgd<F> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<F>, lr: f64) {
        let (mu, lr) = (F::cast(self.momentum), F::cast(lr));
        let wd = F::cast(self.weight_decay);
        self.velocity.resize(store.len(), None);
        for (p, vel) in store.iter_mut().zip(&mut self.velocity) {
            if !p.trainable() {
                continue;
            }
            let decay = if p.kind == ParamKind::Weight { wd } else { F::zero() };
            let v = vel.get_or_insert_with(|| vec![F::zero(); p.value.numel()]);
            for ((x, &g), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.iter_mut()) {
                *v = mu * *v + g;
                *x -= lr * (*v + decay * *x);
            }
        }
    }
}

/// One SGD update of `store` using its held gradients.
pub fn optimizer_step<F: Float>(store: &mut ParamStore<F>, state: &mut Sgd<F>, lr: f64) {
    state.step(store, lr)
}

/// The training pool and its auxiliary-label mapping (global class id to
/// classifier row).
pub struct TrainData<'a> {
    pub dataset: &'a Dataset,
    pub pool: ClassPool,
    aux_row: Vec<Option<usize>>,
}

impl<'a> TrainData<'a> {
    pub fn new(dataset: &'a Dataset, split: &SplitSpec) -> Result<Self> {
        split.validate(dataset.index())?;
        let pool = split.seen_pool(dataset.index());
        let mut aux_row = vec![None; dataset.num_classes()];
        for (row, c) in pool.class_ids().enumerate() {
            aux_row[c] = Some(row);
        }
        Ok(Self { dataset, pool, aux_row })
    }

    pub fn num_classes(&self) -> usize {
        self.pool.len()
    }

    pub fn aux_labels(&self, sample_ids: &[usize]) -> Vec<usize> {
        sample_ids
            .iter()
            .map(|&s| self.aux_row[self.dataset.sample(s).class_id].expect("training sample outside the pool"))
            .collect()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.dataset.image_shape(), self.num_classes())
    }
}

pub struct TrainOutcome<F> {
    pub params: ModelParams<F>,
    pub log: Vec<TrainLogRecord>,
}

/// Called after every update with the new record and parameters.
pub type Observer<'o, F> = dyn FnMut(&TrainLogRecord, &ModelParams<F>) -> Result<()> + 'o;

fn argmax_rows<F: Float>(t: &Tensor<F>) -> Vec<usize> {
    let k = t.shape()[1];
    (0..t.shape()[0])
        .map(|i| {
            let row = t.row(i);
            (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect()
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

fn finite(episode: usize, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            episode,
            what: format!("{what} = {v}"),
        })
    }
}

/// Seed of the training episode stream.
pub fn episode_seed(seed: u64) -> u64 {
    derive_seed(seed, "train.episodes")
}

struct EpisodeLosses {
    loss: Var,
    l_g: f64,
    l_ce: f64,
    acc: f64,
}

/// Builds the episode objective on `g` and returns its loss node along with
/// the support batch statistics.
pub fn episode_objective<F: Float>(
    g: &mut Graph<F>,
    params: &ModelParams<F>,
    data: &TrainData<'_>,
    episode: &Episode,
    loss_cfg: LossConfig,
    mode: TrainMode,
) -> Result<(Var, Vec<crate::numerics::BatchStats<F>>, [f64; 3])> {
    let (out, stats) = episode_losses(g, params, data, episode, loss_cfg, mode)?;
    Ok((out.loss, stats, [out.l_g, out.l_ce, out.acc]))
}

fn episode_losses<F: Float>(
    g: &mut Graph<F>,
    params: &ModelParams<F>,
    data: &TrainData<'_>,
    episode: &Episode,
    loss_cfg: LossConfig,
    mode: TrainMode,
) -> Result<(EpisodeLosses, Vec<crate::numerics::BatchStats<F>>)> {
    let bound = params.bind(g);
    let s_ids = episode.support_ids();
    let s_labels = episode.support_labels();
    let q_labels = episode.query_labels();
    let xs = g.constant(data.dataset.batch::<F>(&s_ids)?);
    let (vs, stats) = embed(g, params, &bound, xs, BnMode::Train)?;

    let need_ce = mode == TrainMode::FitOnly || loss_cfg.lambda != 0.0;
    let l_ce = if need_ce {
        let logits = g.linear(vs, bound.aux_w, bound.aux_b)?;
        Some(fit_loss(g, logits, &data.aux_labels(&s_ids))?)
    } else {
        None
    };
    let xq = g.constant(data.dataset.batch::<F>(&episode.query_ids())?);
    let (vq, _) = embed(g, params, &bound, xq, BnMode::Train)?;

    let out = match mode {
        TrainMode::Balanced => {
            let centroids = centroids_var(g, vs, &s_labels, episode.ways())?;
            let scores = pair_scores(g, &bound, vq, centroids)?;
            let logp = log_posteriors(g, scores)?;
            let l_g = generalization_loss(g, logp, &q_labels)?;
            let acc = accuracy(&argmax_rows(g.value(logp)), &q_labels);
            let l_ce_v = l_ce.map_or(0.0, |v| g.value(v).item().as_f64());
            let loss = match l_ce {
                Some(ce) => balance_loss(g, l_g, ce, loss_cfg)?,
                None => l_g,
            };
            EpisodeLosses {
                loss,
                l_g: g.value(l_g).item().as_f64(),
                l_ce: l_ce_v,
                acc,
            }
        }
        TrainMode::FitOnly => {
            // The scorer is absent, so progress is reported with a
            // nearest-centroid readout of the current embeddings.
            let ce = l_ce.expect("fit-only training computes the fit loss");
            let loss = g.scale(ce, F::cast(loss_cfg.lambda));
            let centroids = compute_centroids(g.value(vs), &s_labels)?;
            let scores = head_scores(params, Head::Euclidean, g.value(vq), &centroids)?;
            let mut l_g = 0.0;
            let mut pred = Vec::with_capacity(q_labels.len());
            for (i, &y) in q_labels.iter().enumerate() {
                let p = posterior_from_scores(scores.row(i));
                l_g -= p[y].as_f64().ln();
                pred.push(argmax_rows(&Tensor::new(vec![1, p.len()], p)?)[0]);
            }
            EpisodeLosses {
                loss,
                l_g: l_g / q_labels.len() as f64,
                l_ce: g.value(ce).item().as_f64(),
                acc: accuracy(&pred, &q_labels),
            }
        }
    };
    Ok((out, stats))
}

/// Copies graph gradients into the store, zeroing the rest.
fn load_grads<F: Float>(params: &mut ModelParams<F>, g: &Graph<F>) {
    let store = params.store_mut();
    store.zero_grad();
    for (id, grad) in g.param_grads() {
        store.get_mut(id).grad.data_mut().copy_from_slice(grad.data());
    }
}

/// Runs `cfg.episodes` training episodes from a fresh initialization.
pub fn train<F: Float>(
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    mode: TrainMode,
    observer: &mut Observer<'_, F>,
) -> Result<TrainOutcome<F>> {
    let params = ModelParams::init(data.model_config(), cfg.seed)?;
    train_from(cfg, data, mode, params, observer)
}

/// Runs `cfg.episodes` training episodes starting from `params`.
pub fn train_from<F: Float>(
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    mode: TrainMode,
    mut params: ModelParams<F>,
    observer: &mut Observer<'_, F>,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    let spec = cfg.episode_spec()?;
    let loss_cfg = cfg.loss()?;
    if mode == TrainMode::FitOnly && cfg.lambda == 0.0 {
        return Err(Error::Config(vec![
            "lambda: must be positive when the metric head is removed (no training signal otherwise)".into(),
        ]));
    }
    if params.config().num_seen != data.num_classes() {
        return Err(Error::shape(format!(
            "aux.weight: model has {} rows, training pool has {} classes",
            params.config().num_seen,
            data.num_classes()
        )));
    }
    let seed = episode_seed(cfg.seed);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.episodes);
    for t in 0..cfg.episodes {
        let start = Instant::now();
        let episode = episode_at(&data.pool, &spec, seed, t)?;
        let mut g = Graph::new();
        let (out, stats) = episode_losses(&mut g, &params, data, &episode, loss_cfg, mode)?;
        let l_bal = finite(t, "l_bal", g.value(out.loss).item().as_f64())?;
        g.backward(out.loss)?;
        load_grads(&mut params, &g);
        drop(g);
        let lr = cfg.lr_at(t);
        sgd.step(params.store_mut(), lr);
        params.update_running_stats(&stats);
        if !params.is_finite() {
            return Err(Error::NonFinite {
                episode: t,
                what: "parameters after update".into(),
            });
        }
        let record = TrainLogRecord {
            episode: t,
            l_bal,
            l_g: out.l_g,
            l_ce: out.l_ce,
            episode_acc: out.acc,
            lr,
            ms: start.elapsed().as_secs_f64() * 1e3,
        };
        observer(&record, &params)?;
        log.push(record);
    }
    Ok(TrainOutcome { params, log })
}

/// Baseline without episodes: the embedding and auxiliary classifier are
/// trained by cross-entropy on shuffled mini-batches drawn from every
/// training class. Uses as many steps as `cfg.episodes` and batches of one
/// episode's worth of images.
pub fn train_minibatch<F: Float>(
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    observer: &mut Observer<'_, F>,
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    let spec = cfg.episode_spec()?;
    let batch = spec.support_len() + spec.query_len();
    let mut params = ModelParams::<F>::init(data.model_config(), cfg.seed)?;
    let samples: Vec<usize> = data.pool.all_samples().into_iter().map(|(s, _)| s).collect();
    if samples.len() < 2 {
        return Err(Error::Episode("training pool has fewer than 2 samples".into()));
    }
    let batch = batch.min(samples.len());
    let shuffle_seed = derive_seed(cfg.seed, "train.minibatch");
    let mut order = Vec::new();
    let mut pass = 0u64;
    let mut cursor = 0;
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.episodes);
    for t in 0..cfg.episodes {
        let start = Instant::now();
        if cursor + batch > order.len() {
            order = samples.clone();
            order.shuffle(&mut indexed_rng(shuffle_seed, pass));
            pass += 1;
            cursor = 0;
        }
        let ids = &order[cursor..cursor + batch];
        cursor += batch;
        let labels = data.aux_labels(ids);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let x = g.constant(data.dataset.batch::<F>(ids)?);
        let (v, stats) = embed(&mut g, &params, &bound, x, BnMode::Train)?;
        let logits = g.linear(v, bound.aux_w, bound.aux_b)?;
        let acc = accuracy(&argmax_rows(g.value(logits)), &labels);
        let loss = fit_loss(&mut g, logits, &labels)?;
        let l_ce = finite(t, "l_ce", g.value(loss).item().as_f64())?;
        g.backward(loss)?;
        load_grads(&mut params, &g);
        drop(g);
        let lr = cfg.lr_at(t);
        sgd.step(params.store_mut(), lr);
        params.update_running_stats(&stats);
        if !params.is_finite() {
            return Err(Error::NonFinite {
                episode: t,
                what: "parameters after update".into(),
            });
        }
        let record = TrainLogRecord {
            episode: t,
            l_bal: l_ce,
            l_g: 0.0,
            l_ce,
            episode_acc: acc,
            lr,
            ms: start.elapsed().as_secs_f64() * 1e3,
        };
        observer(&record, &params)?;
        log.push(record);
    }
    Ok(TrainOutcome { params, log })
}

/// Observer that ignores every record.
pub fn no_observer<F>() -> impl FnMut(&TrainLogRecord, &ModelParams<F>) -> Result<()> {
    |_, _| Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamKind;
    use serde_json::json;

    #[test]
    fn defaults_match_reference_values() {
        let c = TrainConfig::from_json(&json!({})).unwrap();
        let v = serde_json::to_value(&c).unwrap();
        for (k, want) in [
            ("C", json!(5)),
            ("S_tr", json!(1)),
            ("Q", json!(5)),
            ("S_te", json!(15)),
            ("lambda", json!(0.1)),
            ("lr", json!(0.001)),
            ("weight_decay", json!(0.0005)),
            ("momentum", json!(0.9)),
            ("T", json!(10000)),
            ("episodes_per_epoch", json!(100)),
            ("lr_decay_every_epochs", json!(20)),
            ("lr_decay_factor", json!(0.5)),
        ] {
            assert_eq!(v[k], want, "{k}");
        }
    }

    #[test]
    fn every_violation_is_reported() {
        let err = TrainConfig::from_json(&json!({"lr": -1.0, "momentum": 1.0, "lamda": 0.1, "C": "five"}))
            .unwrap_err()
            .to_string();
        for key in ["lr", "momentum", "lamda", "C"] {
            assert!(err.contains(key), "{key} missing from {err}");
        }
    }

    #[test]
    fn step_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 0.001);
        assert_eq!(c.lr_at(1999), 0.001);
        assert_eq!(c.lr_at(2000), 0.0005);
        assert_eq!(c.lr_at(4000), 0.00025);
        let flat = TrainConfig {
            lr_decay_every_epochs: 0,
            ..c
        };
        assert_eq!(flat.lr_at(9999), 0.001);
    }

    fn store(value: f64, grad: f64, kind: ParamKind) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.register("p", kind, Tensor::full(&[2], value)).unwrap();
        s.get_mut(id).grad = Tensor::full(&[2], grad);
        s
    }

    #[test]
    fn plain_sgd() {
        let mut s = store(1.0, 0.5, ParamKind::Weight);
        Sgd::new(0.0, 0.0).step(&mut s, 0.1);
        assert_eq!(s.by_name("p").unwrap().value.data(), &[0.95, 0.95]);
    }

    #[test]
    fn decay_only_shrinks_geometrically() {
        let mut s = store(2.0, 0.0, ParamKind::Weight);
        let mut opt = Sgd::new(0.0, 0.0005);
        for _ in 0..3 {
            opt.step(&mut s, 0.1);
        }
        let want = 2.0 * (1.0 - 0.1 * 0.0005f64).powi(3);
        assert!((s.by_name("p").unwrap().value.data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn scales_and_buffers_are_exempt_from_decay() {
        let mut s = store(2.0, 0.0, ParamKind::NoDecay);
        Sgd::new(0.9, 0.5).step(&mut s, 0.1);
        assert_eq!(s.by_name("p").unwrap().value.data()[0], 2.0);
        let mut s = store(2.0, 1.0, ParamKind::Buffer);
        Sgd::new(0.9, 0.5).step(&mut s, 0.1);
        assert_eq!(s.by_name("p").unwrap().value.data()[0], 2.0);
    }
}
