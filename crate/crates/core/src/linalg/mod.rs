//! Dense linear algebra: matrices, Gaussian sampling and truncated SVD.

mod matrix;
mod svd;

pub use matrix::Matrix;
pub use svd::{principal_angles, svd, truncated_svd, SvdResult};

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::seeds::rng_from_seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("data length {len} does not match a {rows}x{cols} matrix")]
    BadLength { len: usize, rows: usize, cols: usize },
    #[error("rows have different lengths")]
    Ragged,
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("rank {rank} outside 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },
    #[error("empty input")]
    Empty,
}

/// `rows × cols` matrix of i.i.d. `N(0, std²)` entries, deterministic in `seed`.
pub fn gaussian_matrix(rows: usize, cols: usize, std: f64, seed: u64) -> Matrix {
    gaussian_matrix_with(rows, cols, std, &mut rng_from_seed(seed))
}

/// Like [`gaussian_matrix`] but drawing from a caller-owned generator.
pub fn gaussian_matrix_with<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    assert!(std >= 0.0 && std.is_finite(), "std must be finite and non-negative");
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            s
        })
    }

    #[test]
    fn matmul_identity_and_small() {
        let m = gaussian_matrix(3, 4, 1.0, 3);
        assert_eq!(Matrix::identity(3).matmul(&m).unwrap(), m);
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[&[0.0], &[1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = gaussian_matrix(5, 7, 1.0, 11);
        let b = gaussian_matrix(7, 3, 1.0, 12);
        let fast = a.matmul(&b).unwrap();
        let slow = naive(&a, &b);
        for (x, y) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(
            a.matmul(&a),
            Err(LinalgError::DimensionMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn gaussian_is_deterministic_and_zero_std_is_zero() {
        assert_eq!(gaussian_matrix(4, 4, 0.0, 1), Matrix::zeros(4, 4));
        assert!(gaussian_matrix(4, 5, 1.0, 77).bit_eq(&gaussian_matrix(4, 5, 1.0, 77)));
        assert!(!gaussian_matrix(4, 5, 1.0, 77).bit_eq(&gaussian_matrix(4, 5, 1.0, 78)));
    }

    #[test]
    fn gaussian_moments() {
        let g = gaussian_matrix(200, 200, 1.0, 2024);
        let n = g.len() as f64;
        let mean = g.as_slice().iter().sum::<f64>() / n;
        let var = g.as_slice().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(Matrix::zeros(3, 2).frobenius_norm(), 0.0);
        assert!((Matrix::identity(3).frobenius_norm() - 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(Matrix::from_rows(&[&[3.0, 4.0]]).unwrap().frobenius_norm(), 5.0);
    }
}
