use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PcaRow {
    pub pc1: f64,
    pub pc2: f64,
    pub label: usize,
}

/// Projection onto the two leading principal axes.
#[derive(Clone, Debug)]
pub struct Pca {
    pub rows: Vec<PcaRow>,
    pub mean: Vec<f64>,
    /// Unit principal axes, each with its largest-magnitude entry positive.
    pub components: [Vec<f64>; 2],
    /// Covariance eigenvalues in descending order.
    pub eigenvalues: Vec<f64>,
}

/// Eigen-decomposition of a symmetric `n×n` row-major matrix by cyclic
/// Jacobi rotations. Returns eigenvalues and the matching eigenvectors as
/// columns of a row-major `n×n` matrix, unsorted.
pub fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n);
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Centers `[N,D]` features and projects them onto the top two eigenvectors
/// of their sample covariance.
pub fn pca_project<F: Float>(features: &Tensor<F>, labels: &[usize]) -> Result<Pca> {
    let s = features.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape(format!("pca of {s:?} with {} labels", labels.len())));
    }
    let (n, d) = (s[0], s[1]);
    if n < 3 {
        return Err(Error::invalid(format!("pca needs at least 3 points, got {n}")));
    }
    let x: Vec<f64> = features.data().iter().map(|v| v.as_f64()).collect();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(&x[i * d..(i + 1) * d]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = (0..n * d).map(|k| x[k] - mean[k % d]).collect();
    if centered.iter().all(|&v| v == 0.0) {
        return Err(Error::invalid("pca of identical points: covariance has rank 0"));
    }
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let row = &centered[i * d..(i + 1) * d];
        for a in 0..d {
            let ra = row[a];
            if ra == 0.0 {
                continue;
            }
            for b in a..d {
                cov[a * d + b] += ra * row[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let c = cov[a * d + b] / (n - 1) as f64;
            cov[a * d + b] = c;
            cov[b * d + a] = c;
        }
    }
    let (vals, vecs) = jacobi_eigen(cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| vals[j].total_cmp(&vals[i]).then(i.cmp(&j)));
    let axis = |k: usize| -> Vec<f64> {
        let col = order.get(k).copied();
        let mut e: Vec<f64> = match col {
            Some(c) => (0..d).map(|r| vecs[r * d + c]).collect(),
            None => vec![0.0; d],
        };
        let lead = (0..d).fold(0, |b, i| if e[i].abs() > e[b].abs() { i } else { b });
        if e[lead] < 0.0 {
            e.iter_mut().for_each(|v| *v = -*v);
        }
        e
    };
    let components = [axis(0), axis(1)];
    let rows = (0..n)
        .map(|i| {
            let row = &centered[i * d..(i + 1) * d];
            let dot = |e: &[f64]| row.iter().zip(e).map(|(a, b)| a * b).sum::<f64>();
            PcaRow {
                pc1: dot(&components[0]),
                pc2: dot(&components[1]),
                label: labels[i],
            }
        })
        .collect();
    Ok(Pca {
        rows,
        mean,
        components,
        eigenvalues: order.iter().map(|&i| vals[i]).collect(),
    })
}

pub fn pca_csv(rows: &[PcaRow]) -> String {
    let mut out = String::from("pc1,pc2,label\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.pc1, r.pc2, r.label);
    }
    out
}
