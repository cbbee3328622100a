use super::{fixed_distance, Bound, Distance, Head, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::{Float, Graph, Tensor, Var};

/// One centroid row per episode-local class.
#[derive(Clone, Debug, PartialEq)]
pub struct Centroids<F> {
    pub matrix: Tensor<F>,
}

impl<F: Float> Centroids<F> {
    pub fn len(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn row(&self, k: usize) -> &[F] {
        self.matrix.row(k)
    }
}

/// Shots per class, after checking every label in `0..ways` occurs equally
/// often.
fn balanced_shots(labels: &[usize], ways: usize) -> Result<usize> {
    let mut counts = vec![0usize; ways];
    for &l in labels {
        if l >= ways {
            return Err(Error::shape(format!("support label {l} out of {ways} classes")));
        }
        counts[l] += 1;
    }
    let s = counts.first().copied().unwrap_or(0);
    if s == 0 || counts.iter().any(|&c| c != s) {
        return Err(Error::invalid(format!("unbalanced support label counts {counts:?}")));
    }
    Ok(s)
}

/// `O_k = (C/|M|) Σ_{i : y_i = k} V_i` over a balanced support set, so the
/// coefficient is `1/S` with `S` shots per class.
pub fn centroids_var<F: Float>(g: &mut Graph<F>, features: Var, labels: &[usize], ways: usize) -> Result<Var> {
    balanced_shots(labels, ways)?;
    let coef = F::cast(ways as f64) / F::cast(labels.len() as f64);
    g.group_sum(features, labels, ways, coef)
}

/// Centroids of `[C·S, D]` features with local labels `0..C`.
pub fn compute_centroids<F: Float>(features: &Tensor<F>, labels: &[usize]) -> Result<Centroids<F>> {
    let ways = labels.iter().max().map_or(0, |&m| m + 1);
    let mut g = Graph::inference();
    let x = g.constant(features.clone());
    let c = centroids_var(&mut g, x, labels, ways)?;
    Ok(Centroids {
        matrix: g.value(c).clone(),
    })
}

/// Scores every (query, centroid) pair: `[N,D] × [C,D] → [N,C]`, with the
/// scorer reading `concat(q, o, (q−o)⊙(q−o))`.
pub fn pair_scores<F: Float>(g: &mut Graph<F>, bound: &Bound, queries: Var, centroids: Var) -> Result<Var> {
    let (qs, cs) = (g.value(queries).shape().to_vec(), g.value(centroids).shape().to_vec());
    if qs.len() != 2 || cs.len() != 2 || qs[1] != cs[1] {
        return Err(Error::shape(format!("pair scores of {qs:?} against {cs:?}")));
    }
    let (n, c) = (qs[0], cs[0]);
    let qi: Vec<usize> = (0..n * c).map(|p| p / c).collect();
    let oi: Vec<usize> = (0..n * c).map(|p| p % c).collect();
    let q = g.gather_rows(queries, &qi)?;
    let o = g.gather_rows(centroids, &oi)?;
    let d = g.sub(q, o)?;
    let d2 = g.mul(d, d)?;
    let pair = g.concat_cols(&[q, o, d2])?;
    let h = g.linear(pair, bound.hidden_w, bound.hidden_b)?;
    let h = g.relu(h);
    let s = g.linear(h, bound.out_w, bound.out_b)?;
    g.reshape(s, &[n, c])
}

/// Learned score of a single pair; lower means closer.
pub fn metric_score<F: Float>(params: &ModelParams<F>, query: &[F], centroid: &[F]) -> Result<F> {
    let mut g = Graph::inference();
    let bound = params.bind(&mut g);
    let q = g.constant(Tensor::new(vec![1, query.len()], query.to_vec())?);
    let o = g.constant(Tensor::new(vec![1, centroid.len()], centroid.to_vec())?);
    let s = pair_scores(&mut g, &bound, q, o)?;
    Ok(g.value(s).item())
}

/// `[N,C]` scores of queries against centroids under a head.
pub fn head_scores<F: Float>(
    params: &ModelParams<F>,
    head: Head,
    queries: &Tensor<F>,
    centroids: &Centroids<F>,
) -> Result<Tensor<F>> {
    let kind = match head {
        Head::Learned => {
            let mut g = Graph::inference();
            let bound = params.bind(&mut g);
            let q = g.constant(queries.clone());
            let o = g.constant(centroids.matrix.clone());
            let s = pair_scores(&mut g, &bound, q, o)?;
            return Ok(g.value(s).clone());
        }
        Head::Euclidean => Distance::Euclidean,
        Head::Cosine => Distance::Cosine,
    };
    let n = queries.shape()[0];
    let c = centroids.len();
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        for k in 0..c {
            out.push(fixed_distance(kind, queries.row(i), centroids.row(k))?);
        }
    }
    Tensor::new(vec![n, c], out)
}

/// `softmax(−scores)`, via a max-shifted log-sum-exp.
pub fn posterior_from_scores<F: Float>(scores: &[F]) -> Vec<F> {
    let neg: Vec<F> = scores.iter().map(|&s| -s).collect();
    let m = neg.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = m + neg.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
    neg.iter().map(|&v| (v - lse).exp()).collect()
}

/// Posterior over the centroid classes for one query.
pub fn class_posterior<F: Float>(
    params: &ModelParams<F>,
    head: Head,
    query: &[F],
    centroids: &Centroids<F>,
) -> Result<Vec<F>> {
    if centroids.is_empty() {
        return Err(Error::invalid("posterior over zero classes"));
    }
    let q = Tensor::new(vec![1, query.len()], query.to_vec())?;
    let s = head_scores(params, head, &q, centroids)?;
    Ok(posterior_from_scores(s.data()))
}
