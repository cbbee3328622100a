//! The embedding network, class centroids, the learned pair scorer and the
//! fixed-distance alternatives.

mod checkpoint;
mod distance;
mod embedding;
mod metric;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use distance::{fixed_distance, Distance};
pub use embedding::{embed, embed_batch};
pub use metric::{
    centroids_var, class_posterior, compute_centroids, head_scores, metric_score, pair_scores, posterior_from_scores,
    Centroids,
};

use crate::error::{Error, Result};
use crate::numerics::{BatchStats, Float, Graph, ParamId, ParamKind, ParamStore, Tensor, Var, BN_MOMENTUM};
use crate::rng::component_rng;

/// How query–centroid pairs are scored at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Learned,
    Euclidean,
    Cosine,
}

impl std::str::FromStr for Head {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "learned" => Ok(Head::Learned),
            "euclidean" => Ok(Head::Euclidean),
            "cosine" => Ok(Head::Cosine),
            other => Err(format!("unknown head {other:?} (expected learned, euclidean or cosine)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `[3,H,W]` input images.
    pub image_shape: [usize; 3],
    /// Conv blocks in the embedding; each halves the spatial size.
    pub blocks: usize,
    /// Filters per conv block.
    pub channels: usize,
    /// Hidden width of the pair scorer.
    pub metric_hidden: usize,
    /// Rows of the auxiliary classifier (number of seen classes).
    pub num_seen: usize,
}

impl ModelConfig {
    pub const DEFAULT_BLOCKS: usize = 4;
    pub const DEFAULT_CHANNELS: usize = 64;
    pub const DEFAULT_METRIC_HIDDEN: usize = 64;

    pub fn new(image_shape: [usize; 3], num_seen: usize) -> Self {
        Self {
            image_shape,
            blocks: Self::DEFAULT_BLOCKS,
            channels: Self::DEFAULT_CHANNELS,
            metric_hidden: Self::DEFAULT_METRIC_HIDDEN,
            num_seen,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.image_shape;
        let f = 1usize << self.blocks;
        if self.blocks == 0 || self.channels == 0 || self.metric_hidden == 0 || self.num_seen == 0 {
            return Err(Error::invalid(format!("degenerate model configuration {self:?}")));
        }
        if c == 0 || h < f || w < f || h % f != 0 || w % f != 0 {
            return Err(Error::shape(format!(
                "image {h}×{w} must be a positive multiple of {f} for {} pooling blocks",
                self.blocks
            )));
        }
        Ok(())
    }

    /// Flattened embedding width `channels·(H/2^blocks)·(W/2^blocks)`.
    pub fn embed_dim(&self) -> usize {
        let f = 1usize << self.blocks;
        self.channels * (self.image_shape[1] / f) * (self.image_shape[2] / f)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BlockIds {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamIds {
    pub blocks: Vec<BlockIds>,
    pub hidden_w: ParamId,
    pub hidden_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub aux_w: ParamId,
    pub aux_b: ParamId,
}

/// Parameter group a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Block(usize),
    Metric,
    Aux,
}

/// Embedding, pair scorer and auxiliary classifier parameters.
#[derive(Clone, Debug)]
pub struct ModelParams<F> {
    config: ModelConfig,
    store: ParamStore<F>,
    pub(crate) ids: ParamIds,
}

/// Graph leaves for every trainable parameter of a model.
#[derive(Clone, Debug)]
pub struct Bound {
    pub(crate) blocks: Vec<[Var; 4]>,
    pub(crate) hidden_w: Var,
    pub(crate) hidden_b: Var,
    pub(crate) out_w: Var,
    pub(crate) out_b: Var,
    pub(crate) aux_w: Var,
    pub(crate) aux_b: Var,
}

impl Bound {
    /// Weight and bias leaves of the auxiliary classifier.
    pub fn aux(&self) -> (Var, Var) {
        (self.aux_w, self.aux_b)
    }
}

fn uniform<F: Float>(shape: &[usize], fan_in: usize, rng: &mut crate::rng::Rng) -> Tensor<F> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| F::cast(rng.gen_range(-bound..bound)))
}

impl<F: Float> ModelParams<F> {
    /// Structure with every tensor zeroed except unit running variances and
    /// batch-norm scales.
    fn skeleton(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut blocks = Vec::with_capacity(config.blocks);
        let ch = config.channels;
        for b in 0..config.blocks {
            let cin = if b == 0 { config.image_shape[0] } else { ch };
            let p = format!("embed.block{}", b + 1);
            blocks.push(BlockIds {
                conv_w: store.register(&format!("{p}.conv.weight"), ParamKind::Weight, Tensor::zeros(&[ch, cin, 3, 3]))?,
                conv_b: store.register(&format!("{p}.conv.bias"), ParamKind::Weight, Tensor::zeros(&[ch]))?,
                gamma: store.register(&format!("{p}.bn.gamma"), ParamKind::NoDecay, Tensor::full(&[ch], F::one()))?,
                beta: store.register(&format!("{p}.bn.beta"), ParamKind::NoDecay, Tensor::zeros(&[ch]))?,
                running_mean: store.register(&format!("{p}.bn.running_mean"), ParamKind::Buffer, Tensor::zeros(&[ch]))?,
                running_var: store.register(&format!("{p}.bn.running_var"), ParamKind::Buffer, Tensor::full(&[ch], F::one()))?,
            });
        }
        let d = config.embed_dim();
        let h = config.metric_hidden;
        let ids = ParamIds {
            blocks,
            hidden_w: store.register("metric.hidden.weight", ParamKind::Weight, Tensor::zeros(&[h, 3 * d]))?,
            hidden_b: store.register("metric.hidden.bias", ParamKind::Weight, Tensor::zeros(&[h]))?,
            out_w: store.register("metric.out.weight", ParamKind::Weight, Tensor::zeros(&[1, h]))?,
            out_b: store.register("metric.out.bias", ParamKind::Weight, Tensor::zeros(&[1]))?,
            aux_w: store.register("aux.weight", ParamKind::Weight, Tensor::zeros(&[config.num_seen, d]))?,
            aux_b: store.register("aux.bias", ParamKind::Weight, Tensor::zeros(&[config.num_seen]))?,
        };
        Ok(Self { config, store, ids })
    }

    /// Fan-in uniform initialization `±sqrt(6/fan_in)` for conv and linear
    /// weights, zero biases, unit batch-norm scale. The scorer's output layer
    /// starts at zero so an untrained model assigns uniform posteriors.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::skeleton(config)?;
        let mut rng = component_rng(seed, "model.init");
        for b in 0..config.blocks {
            let id = m.ids.blocks[b].conv_w;
            let shape = m.store.value(id).shape().to_vec();
            let fan_in = shape[1] * 9;
            m.store.set_value(id, uniform(&shape, fan_in, &mut rng))?;
        }
        let d = config.embed_dim();
        m.store
            .set_value(m.ids.hidden_w, uniform(&[config.metric_hidden, 3 * d], 3 * d, &mut rng))?;
        m.store
            .set_value(m.ids.aux_w, uniform(&[config.num_seen, d], d, &mut rng))?;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn group_of(&self, id: ParamId) -> Group {
        let name = &self.store.get(id).name;
        if name.starts_with("metric.") {
            Group::Metric
        } else if name.starts_with("aux.") {
            Group::Aux
        } else {
            let rest = name.trim_start_matches("embed.block");
            let n: usize = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(1);
            Group::Block(n - 1)
        }
    }

    /// Sets every scorer weight to zero, making all pair scores equal.
    pub fn zero_metric_head(&mut self) {
        for id in [self.ids.hidden_w, self.ids.hidden_b, self.ids.out_w, self.ids.out_b] {
            let shape = self.store.value(id).shape().to_vec();
            self.store.get_mut(id).value = Tensor::zeros(&shape);
        }
    }

    /// Registers every trainable parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<F>) -> Bound {
        let mut leaf = |id: ParamId| g.param(id, self.store.value(id).clone());
        let blocks = self
            .ids
            .blocks
            .iter()
            .map(|b| [leaf(b.conv_w), leaf(b.conv_b), leaf(b.gamma), leaf(b.beta)])
            .collect();
        Bound {
            blocks,
            hidden_w: leaf(self.ids.hidden_w),
            hidden_b: leaf(self.ids.hidden_b),
            out_w: leaf(self.ids.out_w),
            out_b: leaf(self.ids.out_b),
            aux_w: leaf(self.ids.aux_w),
            aux_b: leaf(self.ids.aux_b),
        }
    }

    /// Folds train-mode batch statistics into the running estimates with
    /// momentum [`BN_MOMENTUM`].
    pub fn update_running_stats(&mut self, stats: &[BatchStats<F>]) {
        let m = F::cast(BN_MOMENTUM);
        for (block, s) in self.ids.blocks.clone().iter().zip(stats) {
            for (id, batch) in [(block.running_mean, &s.mean), (block.running_var, &s.var)] {
                let p = self.store.get_mut(id);
                for (r, &b) in p.value.data_mut().iter_mut().zip(batch) {
                    *r = (F::one() - m) * *r + m * b;
                }
            }
        }
    }

    /// Copies named tensors into a model of the given configuration. Every
    /// parameter must be present with the expected shape; nothing is
    /// modified unless all of them are.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor<F>)>) -> Result<Self> {
        let mut m = Self::skeleton(config)?;
        let mut staged = Vec::with_capacity(named.len());
        for (name, t) in named {
            let id = m
                .store
                .id(&name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter {name:?}")))?;
            let expected = m.store.value(id).shape();
            if expected != t.shape() {
                return Err(Error::Shape(format!(
                    "{name}: checkpoint has {:?}, model expects {expected:?}",
                    t.shape()
                )));
            }
            staged.push((id, t));
        }
        let present: std::collections::HashSet<_> = staged.iter().map(|(id, _)| *id).collect();
        if let Some((_, p)) = m.store.iter().find(|(id, _)| !present.contains(id)) {
            return Err(Error::Format(format!("missing parameter {:?}", p.name)));
        }
        for (id, t) in staged {
            m.store.get_mut(id).value = t;
        }
        Ok(m)
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.store.iter().map(|(_, p)| (p.name.as_str(), &p.value))
    }

    /// Whether every value is finite.
    pub fn is_finite(&self) -> bool {
        self.store.iter().all(|(_, p)| p.value.is_finite())
    }
}

/// Recovers the architecture from checkpoint tensor shapes.
pub fn infer_config<T>(named: &[(String, Tensor<T>)], image_shape: [usize; 3]) -> Result<ModelConfig>
where
    T: Float,
{
    let find = |name: &str| {
        named
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.shape().to_vec())
            .ok_or_else(|| Error::Format(format!("missing parameter {name:?}")))
    };
    let blocks = named
        .iter()
        .filter(|(n, _)| n.starts_with("embed.block") && n.ends_with(".conv.weight"))
        .count();
    let channels = find("embed.block1.conv.weight")?[0];
    let metric_hidden = find("metric.hidden.weight")?[0];
    let num_seen = find("aux.weight")?[0];
    let config = ModelConfig {
        image_shape,
        blocks,
        channels,
        metric_hidden,
        num_seen,
    };
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_embedding_width() {
        let c = ModelConfig::new([3, 32, 32], 7);
        assert_eq!(c.embed_dim(), 256);
        assert!(c.validate().is_ok());
        assert!(ModelConfig::new([3, 24, 32], 7).validate().is_err());
        assert!(ModelConfig::new([3, 8, 8], 7).validate().is_err());
    }

    #[test]
    fn parameter_names_and_groups() {
        let m = ModelParams::<f32>::init(ModelConfig::new([3, 16, 16], 3), 0).unwrap();
        let names: Vec<_> = m.named_tensors().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names.len(), 4 * 6 + 6);
        assert_eq!(names[0], "embed.block1.conv.weight");
        assert!(names.contains(&"aux.weight".to_string()));
        let aux = m.store().id("aux.weight").unwrap();
        assert_eq!(m.group_of(aux), Group::Aux);
        let b3 = m.store().id("embed.block3.bn.gamma").unwrap();
        assert_eq!(m.group_of(b3), Group::Block(2));
    }

    #[test]
    fn init_bounds() {
        let m = ModelParams::<f64>::init(ModelConfig::new([3, 16, 16], 3), 5).unwrap();
        let w = m.store().by_name("embed.block2.conv.weight").unwrap();
        let bound = (6.0f64 / (64.0 * 9.0)).sqrt();
        assert!(w.value.data().iter().all(|v| v.abs() < bound));
        assert!(w.value.norm_f64() > 0.0);
        assert_eq!(m.store().by_name("metric.out.weight").unwrap().value.norm_f64(), 0.0);
        assert_eq!(m.store().by_name("embed.block1.conv.bias").unwrap().value.norm_f64(), 0.0);
    }

    #[test]
    fn from_named_reports_shape_and_missing() {
        let m = ModelParams::<f32>::init(ModelConfig::new([3, 16, 16], 3), 0).unwrap();
        let named: Vec<_> = m.named_tensors().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let other = ModelConfig::new([3, 16, 16], 4);
        let err = ModelParams::from_named(other, named.clone()).unwrap_err();
        assert!(err.to_string().contains("aux.weight"));
        let mut partial = named.clone();
        partial.pop();
        let err = ModelParams::from_named(*m.config(), partial).unwrap_err();
        assert!(err.to_string().contains("missing"));
        assert_eq!(infer_config(&named, [3, 16, 16]).unwrap(), *m.config());
    }
}
