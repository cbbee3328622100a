//! Few-shot task sampling.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::DatasetIndex;
use crate::error::{Error, Result};
use crate::rng::{indexed_rng, Rng};

/// Shape of one task: `ways` classes with `shots` labelled samples each form
/// the support set; `query_ways` of those classes contribute `queries`
/// samples each to the query set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    #[serde(rename = "C")]
    pub ways: usize,
    #[serde(rename = "S_tr")]
    pub shots: usize,
    #[serde(rename = "Q")]
    pub query_ways: usize,
    #[serde(rename = "S_te")]
    pub queries: usize,
}

impl EpisodeSpec {
    pub fn new(ways: usize, shots: usize, query_ways: usize, queries: usize) -> Result<Self> {
        let spec = Self {
            ways,
            shots,
            query_ways,
            queries,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `ways`-way `shots`-shot with every support class queried.
    pub fn balanced(ways: usize, shots: usize, queries: usize) -> Result<Self> {
        Self::new(ways, shots, ways, queries)
    }

    pub fn validate(&self) -> Result<()> {
        if self.query_ways == 0 || self.query_ways > self.ways {
            return Err(Error::invalid(format!(
                "query classes Q={} must satisfy 1 ≤ Q ≤ C={}",
                self.query_ways, self.ways
            )));
        }
        if self.shots == 0 || self.queries == 0 {
            return Err(Error::invalid("support and query shots must be at least 1"));
        }
        Ok(())
    }

    pub fn support_len(&self) -> usize {
        self.ways * self.shots
    }

    pub fn query_len(&self) -> usize {
        self.query_ways * self.queries
    }
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            ways: 5,
            shots: 1,
            query_ways: 5,
            queries: 15,
        }
    }
}

/// Classes eligible for sampling, each with the sample ids it may draw from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassPool {
    classes: Vec<(usize, Vec<usize>)>,
}

impl ClassPool {
    pub fn new(classes: Vec<(usize, Vec<usize>)>) -> Self {
        Self { classes }
    }

    pub fn from_index(index: &DatasetIndex, class_ids: &[usize]) -> Self {
        Self::new(
            class_ids
                .iter()
                .map(|&c| (c, index.classes[c].samples.clone()))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn class_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.iter().map(|(c, _)| *c)
    }

    pub fn samples_of(&self, class_id: usize) -> Option<&[usize]> {
        self.classes
            .iter()
            .find(|(c, _)| *c == class_id)
            .map(|(_, s)| s.as_slice())
    }

    pub fn entries(&self) -> &[(usize, Vec<usize>)] {
        &self.classes
    }

    pub fn min_class_size(&self) -> usize {
        self.classes.iter().map(|(_, s)| s.len()).min().unwrap_or(0)
    }

    /// All sample ids of the pool, class by class.
    pub fn all_samples(&self) -> Vec<(usize, usize)> {
        self.classes
            .iter()
            .flat_map(|(c, s)| s.iter().map(move |&id| (id, *c)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labeled {
    pub sample: usize,
    /// Episode-local label in `0..ways`.
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub support: Vec<Labeled>,
    pub query: Vec<Labeled>,
    /// `class_map[local] = global class id`.
    pub class_map: Vec<usize>,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.class_map.len()
    }

    pub fn support_ids(&self) -> Vec<usize> {
        self.support.iter().map(|l| l.sample).collect()
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|l| l.label).collect()
    }

    pub fn query_ids(&self) -> Vec<usize> {
        self.query.iter().map(|l| l.sample).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|l| l.label).collect()
    }

    /// Debug dump `{support:[ids], query:[ids], class_map}` plus labels.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "support": self.support_ids(),
            "query": self.query_ids(),
            "support_labels": self.support_labels(),
            "query_labels": self.query_labels(),
            "class_map": self.class_map,
        })
    }
}

/// Samples `ways` classes from the pool without replacement (local labels in
/// draw order), then per class `shots` support samples and, for the
/// `query_ways` query classes, `queries` further samples disjoint from the
/// support.
pub fn build_episode(pool: &ClassPool, spec: &EpisodeSpec, rng: &mut Rng) -> Result<Episode> {
    spec.validate()?;
    if pool.len() < spec.ways {
        return Err(Error::Episode(format!(
            "pool has {} classes, episode needs {}",
            pool.len(),
            spec.ways
        )));
    }
    let picks = index::sample(rng, pool.len(), spec.ways).into_vec();
    let mut queried = vec![spec.query_ways == spec.ways; spec.ways];
    if spec.query_ways < spec.ways {
        for q in index::sample(rng, spec.ways, spec.query_ways).into_iter() {
            queried[q] = true;
        }
    }
    let mut support = Vec::with_capacity(spec.support_len());
    let mut query = Vec::with_capacity(spec.query_len());
    let mut class_map = Vec::with_capacity(spec.ways);
    for (label, &pick) in picks.iter().enumerate() {
        let (class_id, samples) = &pool.classes[pick];
        let need = spec.shots + if queried[label] { spec.queries } else { 0 };
        if samples.len() < need {
            return Err(Error::Episode(format!(
                "class {class_id} has {} samples, episode needs {need}",
                samples.len()
            )));
        }
        let draws = index::sample(rng, samples.len(), need).into_vec();
        let (s, q) = draws.split_at(spec.shots);
        support.extend(s.iter().map(|&i| Labeled {
            sample: samples[i],
            label,
        }));
        query.extend(q.iter().map(|&i| Labeled {
            sample: samples[i],
            label,
        }));
        class_map.push(*class_id);
    }
    Ok(Episode {
        support,
        query,
        class_map,
    })
}

/// `count` episodes; episode `t` draws from its own generator derived from
/// `(seed, t)` so any item can be reproduced in isolation.
pub struct EpisodeStream<'a> {
    pool: &'a ClassPool,
    spec: EpisodeSpec,
    seed: u64,
    next: usize,
    count: usize,
}

impl Iterator for EpisodeStream<'_> {
    type Item = Result<Episode>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.count {
            return None;
        }
        let t = self.next;
        self.next += 1;
        Some(episode_at(self.pool, &self.spec, self.seed, t))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.count - self.next;
        (left, Some(left))
    }
}

pub fn episode_stream<'a>(pool: &'a ClassPool, spec: EpisodeSpec, count: usize, seed: u64) -> EpisodeStream<'a> {
    EpisodeStream {
        pool,
        spec,
        seed,
        next: 0,
        count,
    }
}

/// Episode `t` of the stream keyed by `seed`.
pub fn episode_at(pool: &ClassPool, spec: &EpisodeSpec, seed: u64, t: usize) -> Result<Episode> {
    build_episode(pool, spec, &mut indexed_rng(seed, t as u64))
}
