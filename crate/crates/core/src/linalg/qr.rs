use super::{LinalgError, Matrix};
use crate::scalar::Scalar;

/// Householder thin QR of a tall matrix: `a = q · r` with `q` (m×n) having
/// orthonormal columns and `r` (n×n) upper triangular.
///
/// Rank-deficient input is fine: `q` is still orthonormal, and the missing
/// directions are filled in by the reflectors.
pub fn thin_qr<T: Scalar>(a: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>), LinalgError> {
    let (m, n) = a.shape();
    if m < n {
        return Err(LinalgError::InvalidInput(format!(
            "thin QR needs rows >= cols, got {m}x{n}"
        )));
    }
    // Column-major working copy; reflector j lives in cols[j][j..].
    let mut cols: Vec<Vec<T>> = (0..n).map(|j| a.column(j)).collect();
    let mut reflectors: Vec<Option<Vec<T>>> = Vec::with_capacity(n);
    let mut r = Matrix::zeros(n, n);

    for j in 0..n {
        let x = &cols[j][j..];
        let alpha = x.iter().map(|&v| v * v).sum::<T>().sqrt();
        if alpha.is_zero() {
            reflectors.push(None);
            continue;
        }
        let beta = if x[0] > T::zero() { -alpha } else { alpha };
        let mut v: Vec<T> = x.to_vec();
        v[0] -= beta;
        let vnorm = v.iter().map(|&t| t * t).sum::<T>().sqrt();
        if vnorm.is_zero() {
            reflectors.push(None);
            continue;
        }
        for t in v.iter_mut() {
            *t /= vnorm;
        }
        for col in cols.iter_mut().skip(j) {
            apply_reflector(&v, &mut col[j..]);
        }
        reflectors.push(Some(v));
    }
    for (j, col) in cols.iter().enumerate() {
        for i in 0..=j {
            r[(i, j)] = col[i];
        }
    }

    // Q = H_0 H_1 ... H_{n-1} [I; 0]
    let mut q_cols: Vec<Vec<T>> = (0..n)
        .map(|j| {
            let mut e = vec![T::zero(); m];
            e[j] = T::one();
            e
        })
        .collect();
    for j in (0..n).rev() {
        if let Some(v) = &reflectors[j] {
            for col in q_cols.iter_mut() {
                apply_reflector(v, &mut col[j..]);
            }
        }
    }
    let q = Matrix::from_columns(m, &q_cols)?;
    Ok((q, r))
}

/// `x ← (I − 2 v vᵀ) x` for unit `v`.
fn apply_reflector<T: Scalar>(v: &[T], x: &mut [T]) {
    let two = T::one() + T::one();
    let s = two * v.iter().zip(x.iter()).map(|(&a, &b)| a * b).sum::<T>();
    if s.is_zero() {
        return;
    }
    for (xi, &vi) in x.iter_mut().zip(v) {
        *xi -= s * vi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{l1_error, matmul};

    #[test]
    fn reconstructs_and_is_orthonormal() {
        let a = Matrix::from_fn(7, 4, |i, j| {
            ((i * 7 + j * 3) % 5) as f64 - 2.0 + 0.1 * j as f64
        });
        let (q, r) = thin_qr(&a).unwrap();
        assert!(l1_error(&matmul(&q, &r).unwrap(), &a).unwrap() < 1e-12);
        let qtq = q.transpose_matmul(&q).unwrap();
        assert!(l1_error(&qtq, &Matrix::identity(4)).unwrap() < 1e-12);
        for i in 0..4 {
            for j in 0..i {
                assert_eq!(r[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn rank_deficient_still_orthonormal() {
        let mut a = Matrix::<f64>::zeros(5, 3);
        for i in 0..5 {
            a[(i, 0)] = i as f64 + 1.0;
            a[(i, 2)] = 2.0 * (i as f64 + 1.0);
        }
        let (q, r) = thin_qr(&a).unwrap();
        let qtq = q.transpose_matmul(&q).unwrap();
        assert!(l1_error(&qtq, &Matrix::identity(3)).unwrap() < 1e-12);
        assert!(l1_error(&matmul(&q, &r).unwrap(), &a).unwrap() < 1e-12);
    }
}
