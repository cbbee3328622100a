//! The JSON run configuration shared by `train`, `sweep` and `ablate`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use episodic_metric::config::Fields;
use episodic_metric::data::{split_classes, split_holdout, DatasetIndex, SplitSpec, NUM_FOLDS};
use episodic_metric::evaluation::EvalConfig;
use episodic_metric::training::TrainConfig;
use episodic_metric::{Error, Result};

/// How seen and unseen classes are chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Cross-validation fold held out as unseen. Ignored when
    /// `unseen_classes` is set.
    pub fold: usize,
    /// Hold out this many randomly chosen classes instead of a fold.
    pub unseen_classes: Option<usize>,
    /// Fraction of the non-unseen classes reserved for validation.
    pub val_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fold: 0,
            unseen_classes: None,
            val_fraction: 0.0,
        }
    }
}

impl SplitConfig {
    pub fn split(&self, index: &DatasetIndex, seed: u64, ways: usize) -> Result<SplitSpec> {
        match self.unseen_classes {
            Some(n) => split_holdout(index, n, self.val_fraction, seed, ways),
            None => split_classes(index, self.fold, self.val_fraction, seed, ways),
        }
    }
}

/// Parsed with [`RunConfig::from_json`], which applies defaults and reports
/// every invalid key.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(flatten)]
    pub split: SplitConfig,
    /// Save the checkpoint every this many episodes (0: only at the end).
    pub checkpoint_every: usize,
    /// Center-crop and resize every image to `[H, W]` when loading.
    pub image_size: Option<[usize; 2]>,
    /// Test protocol for the commands that evaluate after training.
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            split: SplitConfig::default(),
            checkpoint_every: 1000,
            image_size: None,
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a configuration object, reporting every problem at once.
    /// Missing keys take their defaults; unknown keys are errors.
    pub fn from_json(value: &Value) -> Result<Self> {
        let d = Self::default();
        let mut f = Fields::new(value)?;
        let train = TrainConfig::read(&mut f);
        let split = SplitConfig {
            fold: f.usize("fold", d.split.fold),
            unseen_classes: f.opt_usize("unseen_classes"),
            val_fraction: f.f64("val_fraction", d.split.val_fraction),
        };
        f.check(split.fold < NUM_FOLDS, "fold", format!("must be in 0..{NUM_FOLDS}"));
        f.check(split.unseen_classes != Some(0), "unseen_classes", "must be at least 1");
        f.check(
            (0.0..1.0).contains(&split.val_fraction),
            "val_fraction",
            "must be in [0, 1)",
        );
        let checkpoint_every = f.usize("checkpoint_every", d.checkpoint_every);
        let image_size = match f.allow("image_size") {
            None | Some(Value::Null) => None,
            Some(v) => match serde_json::from_value::<[usize; 2]>(v.clone()) {
                Ok([h, w]) if h > 0 && w > 0 => Some([h, w]),
                _ => {
                    f.fail(format!("image_size: expected [H, W] with positive extents, got {v}"));
                    None
                }
            },
        };
        let eval = match f.allow("eval") {
            None => d.eval,
            Some(v) => match EvalConfig::from_json(v) {
                Ok(e) => e,
                Err(Error::Config(errs)) => {
                    for e in errs {
                        f.fail(format!("eval.{e}"));
                    }
                    d.eval
                }
                Err(e) => {
                    f.fail(format!("eval: {e}"));
                    d.eval
                }
            },
        };
        f.finish()?;
        Ok(Self {
            train,
            split,
            checkpoint_every,
            image_size,
            eval,
        })
    }

    /// The fully expanded configuration, every default written out.
    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("run configuration serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn empty_object_gives_defaults() {
        let c = RunConfig::from_json(&json!({})).unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn expanded_config_round_trips() {
        let c = RunConfig::from_json(&json!({"T": 20, "unseen_classes": 5, "eval": {"L": 5}})).unwrap();
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.eval.shots, 5);
    }

    #[test]
    fn every_problem_is_named() {
        let err = RunConfig::from_json(&json!({
            "lr": -1.0,
            "fold": 3,
            "eval": {"M": 0, "typo": 1},
            "lamda": 0.1
        }))
        .unwrap_err();
        let Error::Config(errs) = err else { panic!("{err}") };
        for key in ["lr", "fold", "eval.M", "eval.typo", "lamda"] {
            assert!(errs.iter().any(|e| e.starts_with(key)), "{key} missing from {errs:?}");
        }
    }
}
