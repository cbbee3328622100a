use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::DatasetIndex;
use crate::episodes::{ClassPool, EpisodeSpec};
use crate::error::{Error, Result};
use crate::rng::component_rng;

pub const NUM_FOLDS: usize = 3;

/// Class-level partition. `seen` feeds meta-training, `unseen` meta-testing,
/// `val` is held out from both.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    pub val: Vec<usize>,
    pub seed: u64,
    /// Seen classes whose visible samples were reduced by scene subsampling.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub visible: BTreeMap<usize, Vec<usize>>,
}

impl SplitSpec {
    pub fn validate(&self, index: &DatasetIndex) -> Result<()> {
        let n = index.num_classes();
        let sets = [("seen", &self.seen), ("unseen", &self.unseen), ("val", &self.val)];
        let mut all = BTreeSet::new();
        for (name, ids) in sets {
            for &c in ids {
                if c >= n {
                    return Err(Error::invalid(format!("{name} class {c} out of {n} classes")));
                }
                if !all.insert(c) {
                    return Err(Error::invalid(format!("class {c} appears in more than one split")));
                }
            }
        }
        for (c, ids) in &self.visible {
            if !self.seen.contains(c) {
                return Err(Error::invalid(format!("sample restriction for non-seen class {c}")));
            }
            let members: BTreeSet<_> = index.classes[*c].samples.iter().collect();
            if ids.is_empty() || ids.iter().any(|i| !members.contains(i)) {
                return Err(Error::invalid(format!("invalid sample restriction for class {c}")));
            }
        }
        Ok(())
    }

    /// Training pool: seen classes with any sample restriction applied.
    pub fn seen_pool(&self, index: &DatasetIndex) -> ClassPool {
        ClassPool::new(
            self.seen
                .iter()
                .map(|&c| {
                    let ids = self
                        .visible
                        .get(&c)
                        .cloned()
                        .unwrap_or_else(|| index.classes[c].samples.clone());
                    (c, ids)
                })
                .collect(),
        )
    }

    pub fn unseen_pool(&self, index: &DatasetIndex) -> ClassPool {
        ClassPool::from_index(index, &self.unseen)
    }

    pub fn val_pool(&self, index: &DatasetIndex) -> ClassPool {
        ClassPool::from_index(index, &self.val)
    }
}

fn shuffled_classes(n: usize, seed: u64, component: &str) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut component_rng(seed, component));
    ids
}

fn finish(mut seen: Vec<usize>, mut unseen: Vec<usize>, mut val: Vec<usize>, seed: u64, ways: usize) -> Result<SplitSpec> {
    seen.sort_unstable();
    unseen.sort_unstable();
    val.sort_unstable();
    if seen.len() < ways {
        return Err(Error::invalid(format!(
            "only {} seen classes remain, episodes need {ways}",
            seen.len()
        )));
    }
    Ok(SplitSpec {
        seen,
        unseen,
        val,
        seed,
        visible: BTreeMap::new(),
    })
}

fn carve_val(rest: Vec<usize>, val_fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::invalid(format!("val_fraction {val_fraction} not in [0,1)")));
    }
    let n_val = (val_fraction * rest.len() as f64).round() as usize;
    let (val, seen) = rest.split_at(n_val);
    Ok((seen.to_vec(), val.to_vec()))
}

/// Three-fold cross-validation split: classes are shuffled by `seed` and cut
/// into three near-equal folds; fold `fold` is unseen, `val_fraction` of the
/// rest is held out for validation, and the remainder is seen. `ways` is the
/// episode width the seen set must support.
pub fn split_classes(
    index: &DatasetIndex,
    fold: usize,
    val_fraction: f64,
    seed: u64,
    ways: usize,
) -> Result<SplitSpec> {
    let n = index.num_classes();
    if n < NUM_FOLDS {
        return Err(Error::invalid(format!("need at least {NUM_FOLDS} classes to split, got {n}")));
    }
    if fold >= NUM_FOLDS {
        return Err(Error::invalid(format!("fold {fold} out of 0..{NUM_FOLDS}")));
    }
    let order = shuffled_classes(n, seed, "split.folds");
    let (base, extra) = (n / NUM_FOLDS, n % NUM_FOLDS);
    let start: usize = (0..fold).map(|f| base + usize::from(f < extra)).sum();
    let len = base + usize::from(fold < extra);
    let unseen = order[start..start + len].to_vec();
    let rest: Vec<usize> = order[..start].iter().chain(&order[start + len..]).copied().collect();
    let (seen, val) = carve_val(rest, val_fraction)?;
    finish(seen, unseen, val, seed, ways)
}

/// Holdout split with an explicit number of unseen classes.
pub fn split_holdout(
    index: &DatasetIndex,
    num_unseen: usize,
    val_fraction: f64,
    seed: u64,
    ways: usize,
) -> Result<SplitSpec> {
    let n = index.num_classes();
    if num_unseen == 0 || num_unseen >= n {
        return Err(Error::invalid(format!(
            "cannot hold out {num_unseen} of {n} classes"
        )));
    }
    let order = shuffled_classes(n, seed, "split.holdout");
    let unseen = order[..num_unseen].to_vec();
    let (seen, val) = carve_val(order[num_unseen..].to_vec(), val_fraction)?;
    finish(seen, unseen, val, seed, ways)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsampleMode {
    /// Keep a fraction of the seen classes.
    Categories,
    /// Keep a fraction of the samples of every seen class.
    Scenes,
}

/// Items kept when subsampling `n` at `ratio`.
pub fn kept_count(ratio: f64, n: usize) -> usize {
    // round down; a tiny epsilon absorbs representation error (0.2·10 etc.)
    ((ratio * n as f64) + 1e-9).floor() as usize
}

/// Reduces the training side of `spec` to `keep_ratio` of its classes or of
/// each class's samples. `episode` is the training episode shape the
/// reduced pool must still support.
pub fn subsample_train(
    spec: &SplitSpec,
    index: &DatasetIndex,
    mode: SubsampleMode,
    keep_ratio: f64,
    seed: u64,
    episode: &EpisodeSpec,
) -> Result<SplitSpec> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::invalid(format!("keep ratio {keep_ratio} not in (0,1]")));
    }
    let mut out = spec.clone();
    match mode {
        SubsampleMode::Categories => {
            let keep = kept_count(keep_ratio, spec.seen.len());
            if keep < episode.ways {
                return Err(Error::invalid(format!(
                    "keeping {keep} of {} seen classes leaves fewer than {} for an episode",
                    spec.seen.len(),
                    episode.ways
                )));
            }
            if keep < spec.seen.len() {
                let mut order = spec.seen.clone();
                order.shuffle(&mut component_rng(seed, "subsample.categories"));
                let mut seen = order[..keep].to_vec();
                seen.sort_unstable();
                out.visible.retain(|c, _| seen.contains(c));
                out.seen = seen;
            }
        }
        SubsampleMode::Scenes => {
            let mut rng = component_rng(seed, "subsample.scenes");
            for &c in &spec.seen {
                let ids = spec
                    .visible
                    .get(&c)
                    .cloned()
                    .unwrap_or_else(|| index.classes[c].samples.clone());
                let keep = kept_count(keep_ratio, ids.len());
                if keep < episode.shots + 1 {
                    return Err(Error::invalid(format!(
                        "keeping {keep} samples of class {c} leaves fewer than {} per class",
                        episode.shots + 1
                    )));
                }
                if keep < ids.len() {
                    let mut order = ids;
                    order.shuffle(&mut rng);
                    let mut subset = order[..keep].to_vec();
                    subset.sort_unstable();
                    out.visible.insert(c, subset);
                }
            }
        }
    }
    Ok(out)
}
