use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    /// Squared L2 distance.
    Euclidean,
    /// `1 − cos(q, o)`.
    Cosine,
}

pub fn fixed_distance<F: Float>(kind: Distance, query: &[F], centroid: &[F]) -> Result<F> {
    if query.len() != centroid.len() {
        return Err(Error::shape(format!(
            "distance between {}- and {}-dimensional vectors",
            query.len(),
            centroid.len()
        )));
    }
    match kind {
        Distance::Euclidean => Ok(query.iter().zip(centroid).map(|(&a, &b)| (a - b) * (a - b)).sum()),
        Distance::Cosine => {
            let dot: F = query.iter().zip(centroid).map(|(&a, &b)| a * b).sum();
            let nq: F = query.iter().map(|&a| a * a).sum::<F>().sqrt();
            let no: F = centroid.iter().map(|&a| a * a).sum::<F>().sqrt();
            if nq == F::zero() || no == F::zero() {
                return Err(Error::invalid("cosine distance of a zero vector"));
            }
            Ok(F::one() - dot / (nq * no))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_vectors_are_at_zero() {
        let q = [0.3f64, -1.0, 2.0];
        assert_eq!(fixed_distance(Distance::Euclidean, &q, &q).unwrap(), 0.0);
        assert!(fixed_distance(Distance::Cosine, &q, &q).unwrap().abs() < 1e-15);
    }

    #[test]
    fn orthogonal_unit_vectors() {
        let (q, o) = ([1.0, 0.0], [0.0, 1.0]);
        assert_eq!(fixed_distance(Distance::Euclidean, &q, &o).unwrap(), 2.0);
        assert_eq!(fixed_distance(Distance::Cosine, &q, &o).unwrap(), 1.0);
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        assert!(fixed_distance(Distance::Cosine, &[0.0f64, 0.0], &[1.0, 0.0]).is_err());
        assert!(fixed_distance(Distance::Euclidean, &[0.0f64], &[1.0, 0.0]).is_err());
    }
}
