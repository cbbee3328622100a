use super::{Bound, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::{BatchStats, BnMode, Float, Graph, Tensor, Var};

/// Runs the conv blocks (conv pad 1, batch norm, ReLU, 2×2 max pool) and
/// flattens to `[N,D]`. Train mode also returns each block's batch
/// statistics; the caller decides whether to fold them into the running
/// estimates.
pub fn embed<F: Float>(
    g: &mut Graph<F>,
    params: &ModelParams<F>,
    bound: &Bound,
    images: Var,
    mode: BnMode,
) -> Result<(Var, Vec<BatchStats<F>>)> {
    let cfg = params.config();
    let s = g.value(images).shape();
    if s.len() != 4 || s[1..] != cfg.image_shape[..] || s[0] == 0 {
        return Err(Error::shape(format!(
            "embed expects [N,{},{},{}], got {s:?}",
            cfg.image_shape[0], cfg.image_shape[1], cfg.image_shape[2]
        )));
    }
    let mut x = images;
    let mut stats = Vec::new();
    for (ids, vars) in params.ids.blocks.iter().zip(&bound.blocks) {
        let [w, b, gamma, beta] = *vars;
        x = g.conv2d(x, w, b, 1)?;
        // ReLU commutes exactly with max pooling (values and gradients), so
        // it runs on the pooled map.
        let (y, st) = g.batch_norm_max_pool2d(
            x,
            gamma,
            beta,
            params.store().value(ids.running_mean),
            params.store().value(ids.running_var),
            mode,
        )?;
        stats.extend(st);
        x = g.relu(y);
    }
    Ok((g.flatten(x)?, stats))
}

/// Eval-mode embeddings of a `[N,3,H,W]` batch.
pub fn embed_batch<F: Float>(params: &ModelParams<F>, images: &Tensor<F>) -> Result<Tensor<F>> {
    let mut g = Graph::inference();
    let bound = params.bind(&mut g);
    let x = g.constant(images.clone());
    let (v, _) = embed(&mut g, params, &bound, x, BnMode::Eval)?;
    Ok(g.value(v).clone())
}
