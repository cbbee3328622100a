#![allow(dead_code)]

use episodic_metric::data::{generate_synthetic, split_holdout, Dataset, SplitSpec};
use episodic_metric::model::{ModelConfig, ModelParams};
use episodic_metric::numerics::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Floor on the relative-error denominator. Central differences with
/// `H = 1e-6` carry about 1e-10 of round-off, so gradients far below this
/// floor are judged by absolute error instead.
pub const REL_FLOOR: f64 = 1e-5;

/// Worst elementwise `|a − n| / (max(|a|, |n|) + REL_FLOOR)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs().max(n.abs()) + REL_FLOOR))
        .fold(0.0, f64::max)
}

/// Compares gradients of `build` with respect to every input against
/// central differences. `build` maps leaf inputs to a scalar loss; it is
/// re-run on perturbed copies for the numeric side.
pub fn grad_check(inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[k])
            .map_or(vec![0.0; t.numel()], |gr| gr.data().to_vec());
        let numeric: Vec<f64> = (0..t.numel())
            .map(|j| {
                let eval = |delta: f64| {
                    let mut ins = inputs.to_vec();
                    ins[k].data_mut()[j] += delta;
                    let mut g = Graph::new();
                    let vs: Vec<Var> = ins.iter().map(|t| g.variable(t.clone())).collect();
                    let l = build(&mut g, &vs);
                    g.value(l).item()
                };
                (eval(H) - eval(-H)) / (2.0 * H)
            })
            .collect();
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}

/// `Σ out ⊙ r` with fixed random weights `r`, so every output element
/// contributes a distinct gradient.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let shape = g.value(out).shape().to_vec();
    let r = g.constant(random(&shape, &mut rng(seed)));
    let m = g.mul(out, r).unwrap();
    g.sum(m)
}

/// Tiny architecture for 8×8 inputs: three pooling blocks of four channels.
pub fn tiny_config(num_seen: usize) -> ModelConfig {
    ModelConfig {
        image_shape: [3, 8, 8],
        blocks: 3,
        channels: 4,
        metric_hidden: 5,
        num_seen,
    }
}

/// A small model whose batch-norm scales, shifts and running statistics are
/// randomized away from their trivial initial values.
pub fn tiny_model(num_seen: usize, seed: u64) -> ModelParams<f64> {
    let mut p = ModelParams::<f64>::init(tiny_config(num_seen), seed).unwrap();
    let mut r = rng(seed ^ 0xabc);
    let ids: Vec<_> = p.store().iter().map(|(id, _)| id).collect();
    for id in ids {
        let param = p.store_mut().get_mut(id);
        let name = param.name.clone();
        for v in param.value.data_mut() {
            if name.ends_with("running_var") || name.ends_with("gamma") {
                *v = r.gen_range(0.5..1.5);
            } else if name.ends_with("running_mean") || name.ends_with("beta") || name.contains("bias") {
                *v = r.gen_range(-0.3..0.3);
            } else if name == "metric.out.weight" {
                *v = r.gen_range(-1.0..1.0);
            }
        }
    }
    p
}

pub fn tiny_data(seed: u64) -> (Dataset, SplitSpec) {
    let ds = generate_synthetic(5, 6, [3, 8, 8], seed).unwrap();
    let split = split_holdout(ds.index(), 2, 0.0, seed, 2).unwrap();
    (ds, split)
}

/// The reference synthetic benchmark: 12 classes of 50 images at 32×32,
/// 7 seen and 5 unseen.
pub fn benchmark(seed: u64) -> (Dataset, SplitSpec) {
    let ds = generate_synthetic(12, 50, [3, 32, 32], seed).unwrap();
    let split = split_holdout(ds.index(), 5, 0.0, seed, 5).unwrap();
    (ds, split)
}
