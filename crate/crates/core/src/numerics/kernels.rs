//! Raw loops behind the differentiable primitives. Everything here works on
//! contiguous row-major slices; shapes are validated by the caller.

use super::float::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Rows of the unfolded input.
    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Columns of the unfolded input: one per output pixel of the batch.
    pub fn cols_len(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Valid output columns `[x0, x1)` for kernel column `kj`.
    fn x_range(&self, kj: usize) -> (usize, usize) {
        let x0 = self.pad.saturating_sub(kj).min(self.wo);
        let x1 = (self.w + self.pad).saturating_sub(kj).min(self.wo);
        (x0, x1.max(x0))
    }
}

/// Output columns per conv chunk. The batch is processed a few samples at a
/// time so the unfolded patches stay cache-sized.
pub(crate) const CONV_CHUNK_COLS: usize = 256;

impl ConvGeom {
    /// Samples per chunk.
    pub fn chunk(&self) -> usize {
        (CONV_CHUNK_COLS / (self.ho * self.wo)).clamp(1, self.n.max(1))
    }

    /// The same convolution restricted to `n` samples.
    pub fn with_batch(&self, n: usize) -> Self {
        Self { n, ..*self }
    }
}

/// Unfolds `[N,Cin,H,W]` into `[Cin·kh·kw, N·Ho·Wo]`, overwriting `cols`.
pub(crate) fn im2col_into<F: Float>(input: &[F], g: &ConvGeom, cols: &mut [F]) {
    let cols_n = g.cols_len();
    let hw = g.h * g.w;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                let (x0, x1) = g.x_range(kj);
                for b in 0..g.n {
                    let src = &input[(b * g.cin + c) * hw..][..hw];
                    for y in 0..g.ho {
                        let dst = &mut dst_row[(b * g.ho + y) * g.wo..][..g.wo];
                        let sy = (y + ki) as isize - g.pad as isize;
                        if sy < 0 || sy >= g.h as isize || x0 == x1 {
                            dst.fill(F::zero());
                            continue;
                        }
                        let srow = &src[sy as usize * g.w..][..g.w];
                        let s0 = x0 + kj - g.pad;
                        dst[..x0].fill(F::zero());
                        dst[x0..x1].copy_from_slice(&srow[s0..s0 + (x1 - x0)]);
                        dst[x1..].fill(F::zero());
                    }
                }
            }
        }
    }
}

#[cfg(test)]
pub(crate) fn im2col<F: Float>(input: &[F], g: &ConvGeom) -> Vec<F> {
    let mut cols = vec![F::zero(); g.patch_len() * g.cols_len()];
    im2col_into(input, g, &mut cols);
    cols
}

/// Adjoint of [`im2col`]: folds `[Cin·kh·kw, N·Ho·Wo]` back and adds it
/// into `[N,Cin,H,W]`.
pub(crate) fn col2im_add<F: Float>(cols: &[F], g: &ConvGeom, out: &mut [F]) {
    let cols_n = g.cols_len();
    let hw = g.h * g.w;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                let (x0, x1) = g.x_range(kj);
                if x0 == x1 {
                    continue;
                }
                for b in 0..g.n {
                    let dst = &mut out[(b * g.cin + c) * hw..][..hw];
                    for y in 0..g.ho {
                        let sy = (y + ki) as isize - g.pad as isize;
                        if sy < 0 || sy >= g.h as isize {
                            continue;
                        }
                        let drow = &mut dst[sy as usize * g.w..][..g.w];
                        let src = &src_row[(b * g.ho + y) * g.wo..][..g.wo];
                        let s0 = x0 + kj - g.pad;
                        for (d, &s) in drow[s0..s0 + (x1 - x0)].iter_mut().zip(&src[x0..x1]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
pub(crate) fn col2im<F: Float>(cols: &[F], g: &ConvGeom) -> Vec<F> {
    let mut out = vec![F::zero(); g.n * g.cin * g.h * g.w];
    col2im_add(cols, g, &mut out);
    out
}

/// `[N,C,P]` → `[C,N·P]`, overwriting `out`.
pub(crate) fn batch_to_channel_major_into<F: Float>(x: &[F], n: usize, c: usize, p: usize, out: &mut [F]) {
    for b in 0..n {
        for ch in 0..c {
            out[(ch * n + b) * p..][..p].copy_from_slice(&x[(b * c + ch) * p..][..p]);
        }
    }
}

/// `[C,N·P]` → `[N,C,P]`, overwriting `out`.
pub(crate) fn channel_to_batch_major_into<F: Float>(x: &[F], n: usize, c: usize, p: usize, out: &mut [F]) {
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * p..][..p].copy_from_slice(&x[(ch * n + b) * p..][..p]);
        }
    }
}

const LANES: usize = 8;

/// Sum with eight interleaved accumulators, combined in a fixed order.
pub(crate) fn lane_sum<F: Float>(xs: &[F]) -> F {
    let mut acc = [F::zero(); LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail: F = chunks.remainder().iter().copied().sum();
    for ch in chunks {
        for l in 0..LANES {
            acc[l] += ch[l];
        }
    }
    combine(acc) + tail
}

/// `Σ (x − c)²`.
pub(crate) fn lane_sq_dev<F: Float>(xs: &[F], c: F) -> F {
    let mut acc = [F::zero(); LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail: F = chunks.remainder().iter().map(|&v| (v - c) * (v - c)).sum();
    for ch in chunks {
        for l in 0..LANES {
            let d = ch[l] - c;
            acc[l] += d * d;
        }
    }
    combine(acc) + tail
}

/// `Σ g·(x − c)`.
pub(crate) fn lane_dot_dev<F: Float>(g: &[F], xs: &[F], c: F) -> F {
    assert_eq!(g.len(), xs.len());
    let mut acc = [F::zero(); LANES];
    let (gc, xc) = (g.chunks_exact(LANES), xs.chunks_exact(LANES));
    let tail: F = gc.remainder().iter().zip(xc.remainder()).map(|(&a, &v)| a * (v - c)).sum();
    for (a, v) in gc.zip(xc) {
        for l in 0..LANES {
            acc[l] += a[l] * (v[l] - c);
        }
    }
    combine(acc) + tail
}

fn combine<F: Float>(acc: [F; LANES]) -> F {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

/// 2×2 stride-2 max pool over `[N·C, H, W]` planes; trailing odd rows/cols
/// are dropped. Returns values and the flat input index of each maximum,
/// taking the first one in row-major order on ties.
pub(crate) fn max_pool2<F: Float>(x: &[F], planes: usize, h: usize, w: usize) -> (Vec<F>, Vec<u8>) {
    let mut out = Vec::with_capacity(planes * (h / 2) * (w / 2));
    let mut arg = Vec::with_capacity(out.capacity());
    for xp in x.chunks_exact(h * w).take(planes) {
        for y in 0..h / 2 {
            let r0 = &xp[2 * y * w..][..w];
            let r1 = &xp[(2 * y + 1) * w..][..w];
            pool_rows(r0, r1, F::one(), F::zero(), &mut out, &mut arg);
        }
    }
    (out, arg)
}

/// Pools one pair of rows after the affine map `scale·v + shift`, pushing
/// the window maxima and the slot (0..4, row-major) each came from. Ties go
/// to the earliest slot.
pub(crate) fn pool_rows<F: Float>(r0: &[F], r1: &[F], scale: F, shift: F, out: &mut Vec<F>, arg: &mut Vec<u8>) {
    for (a, b) in r0.chunks_exact(2).zip(r1.chunks_exact(2)) {
        let v = [a[0], a[1], b[0], b[1]].map(|v| scale * v + shift);
        let (k01, m01) = if v[1] > v[0] { (1, v[1]) } else { (0, v[0]) };
        let (k23, m23) = if v[3] > v[2] { (3, v[3]) } else { (2, v[2]) };
        let (k, m) = if m23 > m01 { (k23, m23) } else { (k01, m01) };
        out.push(m);
        arg.push(k);
    }
}

/// Routes each pooled gradient back to the window slot recorded by
/// [`max_pool2`]; the other three slots receive zero.
pub(crate) fn max_pool2_backward<F: Float>(g: &[F], arg: &[u8], planes: usize, h: usize, w: usize) -> Vec<F> {
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = vec![F::zero(); planes * h * w];
    for p in 0..planes {
        let (gp, ap) = (&g[p * ho * wo..][..ho * wo], &arg[p * ho * wo..][..ho * wo]);
        let plane = &mut dx[p * h * w..][..h * w];
        for y in 0..ho {
            let (r0, r1) = plane[2 * y * w..][..2 * w].split_at_mut(w);
            for xo in 0..wo {
                let (d, k) = (gp[y * wo + xo], ap[y * wo + xo]);
                let row = if k < 2 { &mut *r0 } else { &mut *r1 };
                row[2 * xo + (k as usize & 1)] = d;
            }
        }
    }
    dx
}

/// Row-wise `x − logsumexp(x)` with max subtraction.
pub(crate) fn log_softmax_rows<F: Float>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}
