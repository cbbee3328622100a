//! Reverse-mode automatic differentiation over an append-only node arena.
//!
//! Nodes are only ever appended and every op refers to earlier nodes, so the
//! arena is topologically ordered by construction and the backward sweep is a
//! plain reverse scan. Parent contributions are applied in a fixed order,
//! which makes gradients bit-reproducible.

use super::float::{matmul, Float};
use super::kernels::{self, ConvGeom};
use super::params::ParamId;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

impl std::str::FromStr for BnMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(BnMode::Train),
            "eval" => Ok(BnMode::Eval),
            other => Err(format!("unknown batch-norm mode {other:?} (expected train or eval)")),
        }
    }
}

/// Batch statistics observed by a train-mode batch norm, for updating the
/// running estimates. `var` is the unbiased estimate.
#[derive(Clone, Debug)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

enum Op<F> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<F>,
        inv_std: Vec<F>,
        train: bool,
    },
    BatchNormMaxPool {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<F>,
        inv_std: Vec<F>,
        train: bool,
        argmax: Vec<u8>,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<u8>,
    },
    Reshape(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    LogSoftmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    GatherRows {
        input: Var,
        index: Vec<usize>,
    },
    GroupSum {
        input: Var,
        labels: Vec<usize>,
        coef: F,
    },
    Nll {
        logp: Var,
        labels: Vec<usize>,
    },
}

struct BnNorm<F> {
    mean: Vec<F>,
    inv_std: Vec<F>,
    scale: Vec<F>,
    shift: Vec<F>,
    train: bool,
    stats: Option<BatchStats<F>>,
}

struct Node<F> {
    value: Tensor<F>,
    grad: Option<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// One forward computation and its gradient tape. A graph is built for a
/// single step and then dropped.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph whose parameters do not require gradients; no backward caches
    /// are kept.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<F> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Free leaf that receives a gradient when the graph has gradients enabled.
    pub fn variable(&mut self, value: Tensor<F>) -> Var {
        let rg = self.grad_enabled;
        self.push(value, Op::Leaf, rg)
    }

    /// Leaf bound to a stored parameter so its gradient can be written back.
    pub fn param(&mut self, id: ParamId, value: Tensor<F>) -> Var {
        let v = self.variable(value);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.node(v).value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.node(v).grad.as_ref()
    }

    /// Gradients of every parameter leaf reached by the last backward pass.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.grad.as_ref()?)))
    }

    // ----------------------------------------------------------------- ops

    /// 2-D cross-correlation, stride 1, zero padding `padding` on each side.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, padding: usize) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(input).shape(),
            self.value(weight).shape(),
            self.value(bias).shape(),
        );
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(format!("conv2d input {xs:?}, weight {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input has {}, weight expects {}",
                xs[1], ws[1]
            )));
        }
        if bs != [ws[0]] {
            return Err(Error::shape(format!("conv2d bias {bs:?} for {} filters", ws[0])));
        }
        let (ho, wo) = (
            (xs[2] + 2 * padding).checked_sub(ws[2] - 1).unwrap_or(0),
            (xs[3] + 2 * padding).checked_sub(ws[3] - 1).unwrap_or(0),
        );
        if ho == 0 || wo == 0 {
            return Err(Error::shape(format!(
                "conv2d output would be empty for input {xs:?} and kernel {ws:?}"
            )));
        }
        let geom = ConvGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            pad: padding,
            ho,
            wo,
        };
        let p = ho * wo;
        let (x, w, bias_v) = (self.value(input).data(), self.value(weight).data(), self.value(bias).data());
        let mut out = vec![F::zero(); geom.n * geom.cout * p];
        let chunk = geom.chunk();
        let mut cols = vec![F::zero(); geom.patch_len() * chunk * p];
        let mut out_cm = vec![F::zero(); geom.cout * chunk * p];
        for b0 in (0..geom.n).step_by(chunk) {
            let gc = geom.with_batch(chunk.min(geom.n - b0));
            let in_len = gc.cin * gc.h * gc.w;
            kernels::im2col_into(&x[b0 * in_len..][..gc.n * in_len], &gc, &mut cols);
            let cn = gc.cols_len();
            matmul(
                gc.cout,
                gc.patch_len(),
                cn,
                w,
                false,
                &cols[..gc.patch_len() * cn],
                false,
                F::zero(),
                &mut out_cm[..gc.cout * cn],
            );
            let dst = &mut out[b0 * gc.cout * p..][..gc.n * gc.cout * p];
            kernels::channel_to_batch_major_into(&out_cm[..gc.cout * cn], gc.n, gc.cout, p, dst);
            for (i, plane) in dst.chunks_mut(p).enumerate() {
                let bv = bias_v[i % gc.cout];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        let value = Tensor::from_parts(vec![geom.n, geom.cout, ho, wo], out);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Per-channel normalization of `[N,C,H,W]`. In train mode the batch
    /// statistics are also returned for the caller's running estimates.
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<F>,
        running_var: &Tensor<F>,
        mode: BnMode,
    ) -> Result<(Var, Option<BatchStats<F>>)> {
        let norm = self.bn_statistics(input, gamma, beta, running_mean, running_var, mode)?;
        let x = self.value(input).data();
        let xs = self.value(input).shape().to_vec();
        let (c, p) = (xs[1], xs[2] * xs[3]);
        let mut out = vec![F::zero(); x.len()];
        for (i, (y, xp)) in out.chunks_mut(p).zip(x.chunks(p)).enumerate() {
            let (scale, shift) = (norm.scale[i % c], norm.shift[i % c]);
            for (y, &v) in y.iter_mut().zip(xp) {
                *y = scale * v + shift;
            }
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::from_parts(xs, out),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean: norm.mean,
                inv_std: norm.inv_std,
                train: norm.train,
            },
            rg,
        );
        Ok((v, norm.stats))
    }

    /// Batch norm followed by a 2×2 stride-2 max pool, computed in one pass
    /// without materializing the normalized tensor. Values and gradients
    /// match `batch_norm2d` then `max_pool2d`.
    pub fn batch_norm_max_pool2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<F>,
        running_var: &Tensor<F>,
        mode: BnMode,
    ) -> Result<(Var, Option<BatchStats<F>>)> {
        let xs = self.value(input).shape().to_vec();
        if xs.len() == 4 && (xs[2] < 2 || xs[3] < 2) {
            return Err(Error::shape(format!("max_pool2d needs [N,C,H≥2,W≥2], got {xs:?}")));
        }
        let norm = self.bn_statistics(input, gamma, beta, running_mean, running_var, mode)?;
        let x = self.value(input).data();
        let (c, h, w) = (xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let planes = xs[0] * c;
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for (i, xp) in x.chunks_exact(h * w).enumerate() {
            let (scale, shift) = (norm.scale[i % c], norm.shift[i % c]);
            for y in 0..ho {
                let r0 = &xp[2 * y * w..][..w];
                let r1 = &xp[(2 * y + 1) * w..][..w];
                kernels::pool_rows(r0, r1, scale, shift, &mut out, &mut argmax);
            }
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::from_parts(vec![xs[0], c, ho, wo], out),
            Op::BatchNormMaxPool {
                input,
                gamma,
                beta,
                mean: norm.mean,
                inv_std: norm.inv_std,
                train: norm.train,
                argmax,
            },
            rg,
        );
        Ok((v, norm.stats))
    }

    fn bn_statistics(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<F>,
        running_var: &Tensor<F>,
        mode: BnMode,
    ) -> Result<BnNorm<F>> {
        let xs = self.value(input).shape();
        if xs.len() != 4 {
            return Err(Error::shape(format!("batch_norm2d input {xs:?}")));
        }
        let (n, c, p) = (xs[0], xs[1], xs[2] * xs[3]);
        for (what, t) in [
            ("gamma", self.value(gamma)),
            ("beta", self.value(beta)),
            ("running mean", running_mean),
            ("running var", running_var),
        ] {
            if t.shape() != [c] {
                return Err(Error::shape(format!("batch_norm2d {what} {:?} for {c} channels", t.shape())));
            }
        }
        let m = n * p;
        let train = mode == BnMode::Train;
        if train && m < 2 {
            return Err(Error::shape(format!(
                "batch_norm2d in train mode needs at least 2 values per channel, got {m}"
            )));
        }
        let eps = F::cast(BN_EPS);
        let x = self.value(input).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut norm = BnNorm {
            mean: vec![F::zero(); c],
            inv_std: vec![F::zero(); c],
            scale: vec![F::zero(); c],
            shift: vec![F::zero(); c],
            train,
            stats: None,
        };
        let mut stats = BatchStats {
            mean: vec![F::zero(); c],
            var: vec![F::zero(); c],
        };
        let plane = |b: usize, ch: usize| (b * c + ch) * p;
        let mf = F::cast(m as f64);
        for ch in 0..c {
            let (mean, var) = if train {
                let s: F = (0..n).map(|b| kernels::lane_sum(&x[plane(b, ch)..][..p])).sum();
                let mean = s / mf;
                let ss: F = (0..n).map(|b| kernels::lane_sq_dev(&x[plane(b, ch)..][..p], mean)).sum();
                stats.mean[ch] = mean;
                stats.var[ch] = ss / F::cast((m - 1) as f64);
                (mean, ss / mf)
            } else {
                (running_mean.data()[ch], running_var.data()[ch])
            };
            let is = F::one() / (var + eps).sqrt();
            norm.mean[ch] = mean;
            norm.inv_std[ch] = is;
            norm.scale[ch] = g[ch] * is;
            norm.shift[ch] = bt[ch] - g[ch] * is * mean;
        }
        norm.stats = train.then_some(stats);
        Ok(norm)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().map(|&v| if v > F::zero() { v } else { F::zero() }).collect(),
        );
        let rg = self.rg(input);
        self.push(out, Op::Relu(input), rg)
    }

    /// 2×2 max pool with stride 2 on `[N,C,H,W]`.
    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(Error::shape(format!("max_pool2d needs [N,C,H≥2,W≥2], got {xs:?}")));
        }
        let (vals, argmax) = kernels::max_pool2(self.value(input).data(), xs[0] * xs[1], xs[2], xs[3]);
        let value = Tensor::from_parts(vec![xs[0], xs[1], xs[2] / 2, xs[3] / 2], vals);
        let rg = self.rg(input);
        Ok(self.push(value, Op::MaxPool { input, argmax }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Reshape(input), rg))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).shape();
        let n = s[0];
        let d = s[1..].iter().product::<usize>();
        self.reshape(input, &[n, d])
    }

    /// `x·Wᵀ + b` for `x: [N,Din]`, `W: [Dout,Din]`, `b: [Dout]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(input).shape(),
            self.value(weight).shape(),
            self.value(bias).shape(),
        );
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::shape(format!(
                "linear input {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![F::zero(); n * dout];
        let b = self.value(bias).data();
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(b);
        }
        matmul(
            n,
            din,
            dout,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            true,
            F::one(),
            &mut out,
        );
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(vec![n, dout], out),
            Op::Linear { input, weight, bias },
            rg,
        ))
    }

    /// Row-wise log-softmax of a `[N,K]` matrix.
    pub fn log_softmax(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).shape();
        if s.len() != 2 {
            return Err(Error::shape(format!("log_softmax expects [N,K], got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let out = kernels::log_softmax_rows(self.value(input).data(), r, c);
        let rg = self.rg(input);
        Ok(self.push(Tensor::from_parts(vec![r, c], out), Op::LogSoftmax(input), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(F, F) -> F) -> Result<Vec<F>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(format!("{name} of {:?} and {:?}", x.shape(), y.shape())));
        }
        Ok(x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.binary(a, b, "add", |p, q| p + q)?;
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.binary(a, b, "sub", |p, q| p - q)?;
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.binary(a, b, "mul", |p, q| p * q)?;
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, input: Var, factor: F) -> Var {
        let x = self.value(input);
        let value = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().map(|&v| v * factor).collect(),
        );
        let rg = self.rg(input);
        self.push(value, Op::Scale(input, factor), rg)
    }

    pub fn neg(&mut self, input: Var) -> Var {
        self.scale(input, -F::one())
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: F = self.value(input).data().iter().copied().sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), Op::Sum(input), rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let s: F = x.data().iter().copied().sum::<F>() / F::cast(x.numel() as f64);
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), Op::Mean(input), rg)
    }

    /// Joins `[N,D_i]` matrices side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of no tensors"))?;
        let n = self.value(*first).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != n {
                return Err(Error::shape(format!("concat_cols part {s:?} with {n} rows")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![n, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Output row `j` is input row `index[j]`.
    pub fn gather_rows(&mut self, input: Var, index: &[usize]) -> Result<Var> {
        let s = self.value(input).shape();
        if s.len() != 2 {
            return Err(Error::shape(format!("gather_rows expects a matrix, got {s:?}")));
        }
        let (rows, d) = (s[0], s[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(format!("gather_rows index {bad} out of {rows} rows")));
        }
        if index.is_empty() {
            return Err(Error::shape("gather_rows with an empty index"));
        }
        let x = self.value(input);
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            out.extend_from_slice(x.row(i));
        }
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::from_parts(vec![index.len(), d], out),
            Op::GatherRows {
                input,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// `out[k] = coef · Σ_{i : labels[i] = k} input[i]` for `k < groups`.
    pub fn group_sum(&mut self, input: Var, labels: &[usize], groups: usize, coef: F) -> Result<Var> {
        let s = self.value(input).shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(format!(
                "group_sum of {s:?} with {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= groups) {
            return Err(Error::shape(format!("group label {bad} out of {groups}")));
        }
        let d = s[1];
        let x = self.value(input);
        let mut out = vec![F::zero(); groups * d];
        for (i, &l) in labels.iter().enumerate() {
            for (o, &v) in out[l * d..(l + 1) * d].iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v *= coef);
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::from_parts(vec![groups, d], out),
            Op::GroupSum {
                input,
                labels: labels.to_vec(),
                coef,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood `−(1/N) Σ_i logp[i, labels[i]]`.
    pub fn nll(&mut self, logp: Var, labels: &[usize]) -> Result<Var> {
        let s = self.value(logp).shape();
        if s.len() != 2 || s[0] != labels.len() || labels.is_empty() {
            return Err(Error::shape(format!("nll of {s:?} with {} labels", labels.len())));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let x = self.value(logp).data();
        let total: F = labels.iter().enumerate().map(|(i, &l)| x[i * k + l]).sum();
        let loss = -total / F::cast(labels.len() as f64);
        let rg = self.rg(logp);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Nll {
                logp,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    // ------------------------------------------------------------ backward

    /// Populates gradients of every node reachable from the scalar `loss`.
    /// Previous gradients held by the graph are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!("backward needs a scalar loss, got {loss_shape:?}")));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let seed = Tensor::full(&loss_shape, F::one());
        self.nodes[loss.0].grad = Some(seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &grad);
            for (parent, g) in contributions {
                if parent.0 >= i {
                    return Err(Error::invalid("graph node refers to a later node"));
                }
                self.accumulate(parent, g);
            }
            if matches!(self.nodes[i].op, Op::Leaf) || i == loss.0 {
                self.nodes[i].grad = Some(grad);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<F>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn local_grads(&self, i: usize, dy: &Tensor<F>) -> Vec<(Var, Tensor<F>)> {
        let mut out = Vec::new();
        let g = dy.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let p = geom.ho * geom.wo;
                let (need_x, need_w) = (self.rg(*input), self.rg(*weight));
                let x = self.value(*input).data();
                let w = self.value(*weight).data();
                let chunk = geom.chunk();
                let mut dy_cm = vec![F::zero(); geom.cout * chunk * p];
                let mut cols = vec![F::zero(); geom.patch_len() * chunk * p];
                let mut dx = if need_x { vec![F::zero(); x.len()] } else { Vec::new() };
                let mut dw = vec![F::zero(); if need_w { w.len() } else { 0 }];
                let mut db = vec![F::zero(); geom.cout];
                for b0 in (0..geom.n).step_by(chunk) {
                    let gc = geom.with_batch(chunk.min(geom.n - b0));
                    let (cn, pl) = (gc.cols_len(), gc.patch_len());
                    let in_len = gc.cin * gc.h * gc.w;
                    let dy = &g[b0 * gc.cout * p..][..gc.n * gc.cout * p];
                    let dy_cm = &mut dy_cm[..gc.cout * cn];
                    kernels::batch_to_channel_major_into(dy, gc.n, gc.cout, p, dy_cm);
                    for (c, row) in dy_cm.chunks(cn).enumerate() {
                        db[c] += row.iter().copied().sum::<F>();
                    }
                    if need_w {
                        kernels::im2col_into(&x[b0 * in_len..][..gc.n * in_len], &gc, &mut cols);
                        matmul(gc.cout, cn, pl, dy_cm, false, &cols[..pl * cn], true, F::one(), &mut dw);
                    }
                    if need_x {
                        let dcols = &mut cols[..pl * cn];
                        matmul(pl, gc.cout, cn, w, true, dy_cm, false, F::zero(), dcols);
                        kernels::col2im_add(dcols, &gc, &mut dx[b0 * in_len..][..gc.n * in_len]);
                    }
                }
                if need_x {
                    out.push((*input, Tensor::from_parts(self.value(*input).shape().to_vec(), dx)));
                }
                if need_w {
                    out.push((*weight, Tensor::from_parts(self.value(*weight).shape().to_vec(), dw)));
                }
                if self.rg(*bias) {
                    out.push((*bias, Tensor::from_parts(vec![geom.cout], db)));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let s = self.value(*input).shape();
                let x = self.value(*input).data();
                let (n, c, p) = (s[0], s[1], s[2] * s[3]);
                let plane = |b: usize, ch: usize| (b * c + ch) * p;
                // dgamma = Σ g·x̂, dbeta = Σ g per channel.
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for ch in 0..c {
                    let (mut dg, mut db) = (F::zero(), F::zero());
                    for b in 0..n {
                        let o = plane(b, ch);
                        dg += kernels::lane_dot_dev(&g[o..o + p], &x[o..o + p], mean[ch]);
                        db += kernels::lane_sum(&g[o..o + p]);
                    }
                    dgamma[ch] = dg * inv_std[ch];
                    dbeta[ch] = db;
                }
                if self.rg(*input) {
                    let gm = self.value(*gamma).data();
                    let mut dx = vec![F::zero(); g.len()];
                    let mf = F::cast((n * p) as f64);
                    for ch in 0..c {
                        let (is, mu) = (inv_std[ch], mean[ch]);
                        let scale = gm[ch] * is;
                        let (k0, k1) = if *train {
                            (dbeta[ch] / mf, dgamma[ch] / mf * is)
                        } else {
                            (F::zero(), F::zero())
                        };
                        for b in 0..n {
                            let o = plane(b, ch);
                            for ((d, &gj), &xj) in dx[o..o + p].iter_mut().zip(&g[o..o + p]).zip(&x[o..o + p]) {
                                *d = scale * (gj - k0 - (xj - mu) * k1);
                            }
                        }
                    }
                    out.push((*input, Tensor::from_parts(s.to_vec(), dx)));
                }
                if self.rg(*gamma) {
                    out.push((*gamma, Tensor::from_parts(vec![c], dgamma)));
                }
                if self.rg(*beta) {
                    out.push((*beta, Tensor::from_parts(vec![c], dbeta)));
                }
            }
            Op::BatchNormMaxPool {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                train,
                argmax,
            } => {
                let s = self.value(*input).shape();
                let x = self.value(*input).data();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (h / 2, w / 2);
                let q = ho * wo;
                // Only the selected slot of each window carries gradient; `at`
                // maps a pooled position of plane `i` to its input offset.
                let at = |i: usize, y: usize, xo: usize, k: u8| {
                    i * h * w + (2 * y + (k as usize >> 1)) * w + 2 * xo + (k as usize & 1)
                };
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for i in 0..n * c {
                    let ch = i % c;
                    let (mut dg, mut db) = (F::zero(), F::zero());
                    for y in 0..ho {
                        let gr = &g[i * q + y * wo..][..wo];
                        let ar = &argmax[i * q + y * wo..][..wo];
                        for (xo, (&gj, &k)) in gr.iter().zip(ar).enumerate() {
                            dg += gj * (x[at(i, y, xo, k)] - mean[ch]);
                            db += gj;
                        }
                    }
                    dgamma[ch] += dg;
                    dbeta[ch] += db;
                }
                for ch in 0..c {
                    dgamma[ch] = dgamma[ch] * inv_std[ch];
                }
                if self.rg(*input) {
                    let gm = self.value(*gamma).data();
                    let mf = F::cast((n * h * w) as f64);
                    let mut dx = vec![F::zero(); x.len()];
                    for i in 0..n * c {
                        let ch = i % c;
                        let (is, mu) = (inv_std[ch], mean[ch]);
                        let scale = gm[ch] * is;
                        if *train {
                            let (k0, k1) = (dbeta[ch] / mf, dgamma[ch] / mf * is);
                            let dst = &mut dx[i * h * w..][..h * w];
                            for (d, &xj) in dst.iter_mut().zip(&x[i * h * w..][..h * w]) {
                                *d = scale * (-k0 - (xj - mu) * k1);
                            }
                        }
                        for y in 0..ho {
                            let gr = &g[i * q + y * wo..][..wo];
                            let ar = &argmax[i * q + y * wo..][..wo];
                            for (xo, (&gj, &k)) in gr.iter().zip(ar).enumerate() {
                                dx[at(i, y, xo, k)] += scale * gj;
                            }
                        }
                    }
                    out.push((*input, Tensor::from_parts(s.to_vec(), dx)));
                }
                if self.rg(*gamma) {
                    out.push((*gamma, Tensor::from_parts(vec![c], dgamma)));
                }
                if self.rg(*beta) {
                    out.push((*beta, Tensor::from_parts(vec![c], dbeta)));
                }
            }
            Op::Relu(input) => {
                let x = self.value(*input);
                let dx = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &d)| if v > F::zero() { d } else { F::zero() })
                    .collect();
                out.push((*input, Tensor::from_parts(x.shape().to_vec(), dx)));
            }
            Op::MaxPool { input, argmax } => {
                let s = self.value(*input).shape();
                let dx = kernels::max_pool2_backward(g, argmax, s[0] * s[1], s[2], s[3]);
                out.push((*input, Tensor::from_parts(s.to_vec(), dx)));
            }
            Op::Reshape(input) => {
                let shape = self.value(*input).shape().to_vec();
                out.push((*input, Tensor::from_parts(shape, g.to_vec())));
            }
            Op::Linear { input, weight, bias } => {
                let (xs, ws) = (self.value(*input).shape(), self.value(*weight).shape());
                let (n, din, dout) = (xs[0], xs[1], ws[0]);
                if self.rg(*input) {
                    let mut dx = vec![F::zero(); n * din];
                    matmul(n, dout, din, g, false, self.value(*weight).data(), false, F::zero(), &mut dx);
                    out.push((*input, Tensor::from_parts(xs.to_vec(), dx)));
                }
                if self.rg(*weight) {
                    let mut dw = vec![F::zero(); dout * din];
                    matmul(dout, n, din, g, true, self.value(*input).data(), false, F::zero(), &mut dw);
                    out.push((*weight, Tensor::from_parts(ws.to_vec(), dw)));
                }
                if self.rg(*bias) {
                    let mut db = vec![F::zero(); dout];
                    for row in g.chunks(dout) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    out.push((*bias, Tensor::from_parts(vec![dout], db)));
                }
            }
            Op::LogSoftmax(input) => {
                let y = &self.nodes[i].value;
                let k = y.shape()[1];
                let mut dx = vec![F::zero(); g.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(k).zip(y.data().chunks(k)).zip(g.chunks(k)) {
                    let total: F = gr.iter().copied().sum();
                    for ((d, &yv), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                        *d = gv - yv.exp() * total;
                    }
                }
                out.push((*input, Tensor::from_parts(y.shape().to_vec(), dx)));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        out.push((v, dy.clone()));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    out.push((*a, dy.clone()));
                }
                if self.rg(*b) {
                    let neg = g.iter().map(|&v| -v).collect();
                    out.push((*b, Tensor::from_parts(dy.shape().to_vec(), neg)));
                }
            }
            Op::Mul(a, b) => {
                for (target, other) in [(*a, *b), (*b, *a)] {
                    if self.rg(target) {
                        let o = self.value(other).data();
                        let d = g.iter().zip(o).map(|(&gv, &ov)| gv * ov).collect();
                        out.push((target, Tensor::from_parts(dy.shape().to_vec(), d)));
                    }
                }
            }
            Op::Scale(input, factor) => {
                let d = g.iter().map(|&v| v * *factor).collect();
                out.push((*input, Tensor::from_parts(dy.shape().to_vec(), d)));
            }
            Op::Sum(input) => {
                out.push((*input, Tensor::full(self.value(*input).shape(), g[0])));
            }
            Op::Mean(input) => {
                let x = self.value(*input);
                let v = g[0] / F::cast(x.numel() as f64);
                out.push((*input, Tensor::full(x.shape(), v)));
            }
            Op::ConcatCols(parts) => {
                let total = dy.shape()[1];
                let rows = dy.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        out.push((p, Tensor::from_parts(vec![rows, w], d)));
                    }
                    offset += w;
                }
            }
            Op::GatherRows { input, index } => {
                let x = self.value(*input);
                let d = x.shape()[1];
                let mut dx = vec![F::zero(); x.numel()];
                for (j, &src) in index.iter().enumerate() {
                    for (o, &v) in dx[src * d..(src + 1) * d].iter_mut().zip(&g[j * d..(j + 1) * d]) {
                        *o += v;
                    }
                }
                out.push((*input, Tensor::from_parts(x.shape().to_vec(), dx)));
            }
            Op::GroupSum { input, labels, coef } => {
                let x = self.value(*input);
                let d = x.shape()[1];
                let mut dx = Vec::with_capacity(x.numel());
                for &l in labels {
                    dx.extend(g[l * d..(l + 1) * d].iter().map(|&v| v * *coef));
                }
                out.push((*input, Tensor::from_parts(x.shape().to_vec(), dx)));
            }
            Op::Nll { logp, labels } => {
                let x = self.value(*logp);
                let k = x.shape()[1];
                let mut dx = vec![F::zero(); x.numel()];
                let w = -g[0] / F::cast(labels.len() as f64);
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * k + l] += w;
                }
                out.push((*logp, Tensor::from_parts(x.shape().to_vec(), dx)));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.variable(t(&[1, 1, 3, 3], &k));
        let b = g.variable(t(&[1], &[0.0]));
        let y = g.conv2d(x, w, b, 1).unwrap();
        assert_eq!(g.value(y).data(), &[1.0; 9]);
    }

    #[test]
    fn zero_kernel_yields_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4, 4], |i| i as f64));
        let w = g.variable(Tensor::zeros(&[2, 3, 3, 3]));
        let b = g.variable(t(&[2], &[0.5, -1.5]));
        let y = g.conv2d(x, w, b, 1).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), &[2, 2, 4, 4]);
        for (i, &val) in v.data().iter().enumerate() {
            let ch = (i / 16) % 2;
            assert_eq!(val, [0.5, -1.5][ch]);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.variable(Tensor::zeros(&[1, 3, 3, 3]));
        let b = g.variable(Tensor::zeros(&[1]));
        assert!(matches!(g.conv2d(x, w, b, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn pool_single_window() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.max_pool2d(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn pool_rejects_tiny_planes() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::zeros(&[1, 1, 1, 4]));
        assert!(g.max_pool2d(x).is_err());
    }

    #[test]
    fn log_softmax_of_equal_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[1, 2], &[0.0, 0.0]));
        let y = g.log_softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5f64.ln(), 0.5f64.ln()]);
    }

    #[test]
    fn sum_loss_gives_unit_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.param(ParamId(0), Tensor::from_fn(&[2, 3], |i| i as f64));
        let q = g.param(ParamId(1), Tensor::zeros(&[4]));
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[1.0; 6]);
        assert!(g.grad(q).is_none());
        let grads: Vec<_> = g.param_grads().map(|(id, _)| id).collect();
        assert_eq!(grads, vec![ParamId(0)]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let p = g.variable(Tensor::zeros(&[2]));
        let y = g.relu(p);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn inference_graph_keeps_no_gradients() {
        let mut g = Graph::<f64>::inference();
        let p = g.param(ParamId(0), Tensor::full(&[2], 1.0));
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(p).is_none());
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_fn(&[3, 2, 2, 2], |i| ((i * 7) % 5) as f64 + i as f64 * 0.1));
        let gamma = g.variable(Tensor::full(&[2], 1.0));
        let beta = g.variable(Tensor::zeros(&[2]));
        let (rm, rv) = (Tensor::zeros(&[2]), Tensor::full(&[2], 1.0));
        let (y, stats) = g.batch_norm2d(x, gamma, beta, &rm, &rv, BnMode::Train).unwrap();
        assert!(stats.is_some());
        let v = g.value(y).data();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|b| v[(b * 2 + ch) * 4..][..4].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 12.0;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_zero_gamma_outputs_beta() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_fn(&[2, 2, 2, 2], |i| (i as f64).sin()));
        let gamma = g.variable(Tensor::zeros(&[2]));
        let beta = g.variable(t(&[2], &[0.25, -3.0]));
        let (rm, rv) = (Tensor::zeros(&[2]), Tensor::full(&[2], 1.0));
        let (y, _) = g.batch_norm2d(x, gamma, beta, &rm, &rv, BnMode::Train).unwrap();
        for (i, &v) in g.value(y).data().iter().enumerate() {
            assert_eq!(v, [0.25, -3.0][(i / 4) % 2]);
        }
    }

    #[test]
    fn batch_norm_train_needs_two_values() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::zeros(&[1, 1, 1, 1]));
        let gamma = g.variable(Tensor::full(&[1], 1.0));
        let beta = g.variable(Tensor::zeros(&[1]));
        let (rm, rv) = (Tensor::zeros(&[1]), Tensor::full(&[1], 1.0));
        assert!(g.batch_norm2d(x, gamma, beta, &rm, &rv, BnMode::Train).is_err());
        assert!(g.batch_norm2d(x, gamma, beta, &rm, &rv, BnMode::Eval).is_ok());
    }

    #[test]
    fn nll_rejects_out_of_range_label() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::zeros(&[2, 3]));
        assert!(g.nll(x, &[0, 3]).is_err());
    }

    #[test]
    fn fused_norm_pool_matches_composition() {
        let x = Tensor::from_fn(&[3, 2, 4, 6], |i| ((i * 37) % 23) as f64 / 7.0 - 1.5);
        let gamma = t(&[2], &[1.3, -0.7]);
        let beta = t(&[2], &[0.2, -0.4]);
        let (rm, rv) = (t(&[2], &[0.1, -0.2]), t(&[2], &[1.5, 0.8]));
        for mode in [BnMode::Train, BnMode::Eval] {
            let run = |fused: bool| {
                let mut g = Graph::<f64>::new();
                let (xv, gv, bv) = (g.variable(x.clone()), g.variable(gamma.clone()), g.variable(beta.clone()));
                let (y, _) = if fused {
                    g.batch_norm_max_pool2d(xv, gv, bv, &rm, &rv, mode).unwrap()
                } else {
                    let (n, st) = g.batch_norm2d(xv, gv, bv, &rm, &rv, mode).unwrap();
                    (g.max_pool2d(n).unwrap(), st)
                };
                let w = g.constant(Tensor::from_fn(&[3, 2, 2, 3], |i| (i as f64 * 0.3).sin()));
                let prod = g.mul(y, w).unwrap();
                let l = g.sum(prod);
                g.backward(l).unwrap();
                let grads = [xv, gv, bv].map(|v| g.grad(v).unwrap().data().to_vec());
                (g.value(y).data().to_vec(), grads)
            };
            let (fy, fg) = run(true);
            let (cy, cg) = run(false);
            assert_eq!(fy, cy);
            for (a, b) in fg.iter().zip(&cg) {
                for (u, v) in a.iter().zip(b) {
                    assert!((u - v).abs() < 1e-12, "{u} vs {v}");
                }
            }
        }
    }
}
