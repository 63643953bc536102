//! Dense real-matrix kernels: products, norms, QR and truncated SVD.
//!
//! Everything here is a pure function of its inputs and deterministic: the
//! same matrix always produces bitwise-identical output.

mod matrix;
mod qr;
mod svd;

pub use matrix::Matrix;
pub use qr::thin_qr;
pub use svd::{jacobi_svd, normalize_signs, truncated_svd, SvdTriple};

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("requested {requested} singular triplets but the matrix admits at most {max}")]
    RankOutOfRange { requested: usize, max: usize },
    #[error("no convergence after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("{0}")]
    InvalidInput(String),
}

/// Matrix product `a · b`.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>, LinalgError> {
    if a.cols() != b.rows() {
        return Err(LinalgError::DimensionMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let n = b.cols();
    let mut out = Matrix::zeros(a.rows(), n);
    for i in 0..a.rows() {
        let dst = out.row_mut(i);
        for (r, &air) in a.row(i).iter().enumerate() {
            if air.is_zero() {
                continue;
            }
            for (d, &brj) in dst.iter_mut().zip(b.row(r)) {
                *d += air * brj;
            }
        }
    }
    Ok(out)
}

/// Euclidean norm of every row.
pub fn row_l2_norms<T: Scalar>(w: &Matrix<T>) -> Vec<T> {
    (0..w.rows())
        .map(|i| w.row(i).iter().map(|&x| x * x).sum::<T>().sqrt())
        .collect()
}

/// Euclidean norm of every column.
pub fn col_l2_norms<T: Scalar>(w: &Matrix<T>) -> Vec<T> {
    let mut sq = vec![T::zero(); w.cols()];
    for i in 0..w.rows() {
        for (s, &x) in sq.iter_mut().zip(w.row(i)) {
            *s += x * x;
        }
    }
    sq.into_iter().map(T::sqrt).collect()
}

/// Entrywise L1 distance `Σ |a_ij − b_ij|`.
pub fn l1_error<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<T, LinalgError> {
    if a.shape() != b.shape() {
        return Err(LinalgError::DimensionMismatch {
            op: "l1_error",
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| (x - y).abs())
        .sum())
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn norm2<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_scalar() {
        let a = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let b = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().as_slice(), &[6.0]);
    }

    #[test]
    fn matmul_identity() {
        let m = random(3, 5, 1);
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(4, 2, 2);
        let b = random(2, 5, 3);
        let c = matmul(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let mut s = 0.0;
                for r in 0..2 {
                    s += a[(i, r)] * b[(r, j)];
                }
                assert!((c[(i, j)] - s).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let err = matmul(&random(2, 3, 0), &random(2, 3, 0)).unwrap_err();
        assert!(matches!(err, LinalgError::DimensionMismatch { .. }));
    }

    #[test]
    fn transpose_matmul_agrees_with_explicit_transpose() {
        let a = random(6, 3, 4);
        let b = random(6, 2, 5);
        let fast = a.transpose_matmul(&b).unwrap();
        let slow = matmul(&a.transpose(), &b).unwrap();
        assert!(l1_error(&fast, &slow).unwrap() < 1e-14);
    }

    #[test]
    fn row_norms() {
        let m = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(row_l2_norms(&m), vec![5.0]);
        assert_eq!(row_l2_norms(&Matrix::<f64>::zeros(2, 3)), vec![0.0, 0.0]);
    }

    #[test]
    fn row_norms_match_extended_precision() {
        let m = random(5, 7, 6);
        let norms = row_l2_norms(&m);
        for (i, n) in norms.iter().enumerate() {
            // Compensated (Kahan) sum of squares as the extended-precision oracle.
            let (mut s, mut c) = (0.0f64, 0.0f64);
            for &x in m.row(i) {
                let y = x * x - c;
                let t = s + y;
                c = (t - s) - y;
                s = t;
            }
            assert!((n - s.sqrt()).abs() <= 1e-15 * s.sqrt());
        }
    }

    #[test]
    fn col_norms() {
        let m = Matrix::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(col_l2_norms(&m), vec![5.0]);
        assert_eq!(col_l2_norms(&Matrix::<f64>::identity(3)), vec![1.0; 3]);
        let r = random(6, 4, 7);
        let via_t = row_l2_norms(&r.transpose());
        for (a, b) in col_l2_norms(&r).iter().zip(&via_t) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn l1_error_cases() {
        let a = random(3, 3, 8);
        assert_eq!(l1_error(&a, &a).unwrap(), 0.0);
        let i = Matrix::<f64>::identity(2);
        assert_eq!(l1_error(&i, &Matrix::zeros(2, 2)).unwrap(), 2.0);
        let b = random(3, 3, 9);
        let mut s = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                s += (a[(r, c)] - b[(r, c)]).abs();
            }
        }
        assert!((l1_error(&a, &b).unwrap() - s).abs() < 1e-14);
        assert!(l1_error(&a, &random(3, 2, 1)).is_err());
    }
}
