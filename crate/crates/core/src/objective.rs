//! Fit, generalization and balance losses, all mean-reduced.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Float, Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.1 }
    }
}

impl LossConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        let c = Self { lambda };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

/// Cross-entropy of the auxiliary classifier's logits against global
/// seen-class labels.
pub fn fit_loss<F: Float>(g: &mut Graph<F>, aux_logits: Var, labels: &[usize]) -> Result<Var> {
    let logp = g.log_softmax(aux_logits)?;
    g.nll(logp, labels)
}

/// Mean negative log posterior of the true class, read directly from the
/// log posteriors.
pub fn generalization_loss<F: Float>(g: &mut Graph<F>, log_posteriors: Var, labels: &[usize]) -> Result<Var> {
    g.nll(log_posteriors, labels)
}

/// `l_g + λ·l_ce`.
pub fn balance_loss<F: Float>(g: &mut Graph<F>, l_g: Var, l_ce: Var, cfg: LossConfig) -> Result<Var> {
    cfg.validate()?;
    let weighted = g.scale(l_ce, F::cast(cfg.lambda));
    g.add(l_g, weighted)
}

/// Log posteriors `log_softmax(−scores)` of an `[N,C]` score matrix.
pub fn log_posteriors<F: Float>(g: &mut Graph<F>, scores: Var) -> Result<Var> {
    let neg = g.neg(scores);
    g.log_softmax(neg)
}
