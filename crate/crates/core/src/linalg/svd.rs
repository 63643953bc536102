use super::{dot, matmul, norm2, thin_qr, LinalgError, Matrix};
use crate::scalar::Scalar;

const MAX_JACOBI_SWEEPS: usize = 80;
/// Iterations per block width before the block is widened.
const MAX_SUBSPACE_ITERATIONS: usize = 200;
const OVERSAMPLE: usize = 8;
/// Below this smaller dimension the full one-sided Jacobi SVD is cheaper than
/// subspace iteration.
const DIRECT_LIMIT: usize = 96;
const START_SEED: u64 = 0x5eed_0005_7d00_0001;

/// Top singular triplets of a matrix: `w ≈ U · diag(S) · Vᵀ`.
///
/// Singular values are nonincreasing and nonnegative, the columns of `left`
/// (d×t) and `right` (k×t) are orthonormal, and the largest-magnitude entry of
/// every left vector is positive (the matching right vector is flipped with it).
#[derive(Debug, Clone, PartialEq)]
pub struct SvdTriple<T = f64> {
    pub left: Matrix<T>,
    pub values: Vec<T>,
    pub right: Matrix<T>,
}

impl<T: Scalar> SvdTriple<T> {
    pub fn rank(&self) -> usize {
        self.values.len()
    }

    pub fn left_vector(&self, i: usize) -> Vec<T> {
        self.left.column(i)
    }

    pub fn right_vector(&self, i: usize) -> Vec<T> {
        self.right.column(i)
    }

    /// `U · diag(S) · Vᵀ`.
    pub fn reconstruct(&self) -> Matrix<T> {
        let (d, t) = self.left.shape();
        let us = Matrix::from_fn(d, t, |i, j| self.left[(i, j)] * self.values[j]);
        matmul(&us, &self.right.transpose()).expect("triple shapes are consistent")
    }

    /// Keeps the leading `t` triplets.
    pub fn truncate(mut self, t: usize) -> Self {
        if t < self.values.len() {
            self.values.truncate(t);
            self.left = self.left.leading_columns(t);
            self.right = self.right.leading_columns(t);
        }
        self
    }
}

/// Top-`t` singular triplets of `w`.
///
/// Small matrices go through a one-sided Jacobi SVD; larger ones through
/// block subspace iteration started from a fixed pseudo-random block, with a
/// Jacobi Rayleigh–Ritz step on the projected matrix. Both paths are
/// deterministic.
pub fn truncated_svd<T: Scalar>(w: &Matrix<T>, t: usize) -> Result<SvdTriple<T>, LinalgError> {
    let (d, k) = w.shape();
    let max = d.min(k);
    if t == 0 || t > max {
        return Err(LinalgError::RankOutOfRange { requested: t, max });
    }
    if !w.is_finite() {
        return Err(LinalgError::InvalidInput(
            "matrix has non-finite entries".into(),
        ));
    }
    let mut block = (t + OVERSAMPLE).min(max);
    loop {
        if max <= DIRECT_LIMIT || 2 * block >= max {
            return Ok(jacobi_svd(w)?.truncate(t));
        }
        match subspace_svd(w, t, block) {
            // A cluster of nearly equal values wider than the block stalls
            // the iteration; a wider block separates it.
            Err(LinalgError::NoConvergence { .. }) => block *= 2,
            other => return other,
        }
    }
}

/// Thin SVD with `min(d, k)` triplets via one-sided (Hestenes) Jacobi.
pub fn jacobi_svd<T: Scalar>(w: &Matrix<T>) -> Result<SvdTriple<T>, LinalgError> {
    let (d, k) = w.shape();
    if d == 0 || k == 0 {
        return Err(LinalgError::InvalidInput("empty matrix".into()));
    }
    let wide = d < k;
    // Orthogonalize the columns of a tall m×n matrix (m >= n).
    let (m, n) = if wide { (k, d) } else { (d, k) };
    let mut a: Vec<T> = Vec::with_capacity(m * n);
    for j in 0..n {
        if wide {
            a.extend_from_slice(w.row(j));
        } else {
            a.extend((0..m).map(|i| w[(i, j)]));
        }
    }
    let mut v = vec![T::zero(); n * n];
    for j in 0..n {
        v[j * n + j] = T::one();
    }

    let tol = T::epsilon() * T::from_count(m);
    // Columns below rounding level of the whole matrix cannot be orthogonalized
    // any further against large ones; leave them alone.
    let total: T = a.iter().map(|&x| x * x).sum();
    let negligible = total * T::epsilon() * T::epsilon();
    let mut converged = false;
    let mut off = T::zero();
    for _ in 0..MAX_JACOBI_SWEEPS {
        off = T::zero();
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let (lo, hi) = a.split_at_mut(q * m);
                let ap = &mut lo[p * m..(p + 1) * m];
                let aq = &mut hi[..m];
                let alpha = dot(ap, ap);
                let beta = dot(aq, aq);
                let gamma = dot(ap, aq);
                if alpha <= negligible || beta <= negligible || gamma.is_zero() {
                    continue;
                }
                let cos_angle = gamma.abs() / (alpha.sqrt() * beta.sqrt());
                off = off.max(cos_angle);
                if cos_angle <= tol {
                    continue;
                }
                let two = T::one() + T::one();
                let zeta = (beta - alpha) / (two * gamma);
                let tan = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + tan * tan).sqrt();
                let s = c * tan;
                rotate(ap, aq, c, s);
                let (vlo, vhi) = v.split_at_mut(q * n);
                rotate(&mut vlo[p * n..(p + 1) * n], &mut vhi[..n], c, s);
                rotated = true;
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LinalgError::NoConvergence {
            iterations: MAX_JACOBI_SWEEPS,
            residual: off.to_f64_lossy(),
        });
    }

    let norms: Vec<T> = (0..n)
        .map(|j| {
            let col = &a[j * m..(j + 1) * m];
            if dot(col, col) <= negligible {
                T::zero()
            } else {
                norm2(col)
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| {
        norms[y]
            .partial_cmp(&norms[x])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(x.cmp(&y))
    });

    let mut u_cols: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut known = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<T>> = Vec::with_capacity(n);
    for &j in &order {
        let sigma = norms[j];
        values.push(sigma);
        if sigma > T::zero() {
            u_cols.push(a[j * m..(j + 1) * m].iter().map(|&x| x / sigma).collect());
            known.push(true);
        } else {
            u_cols.push(vec![T::zero(); m]);
            known.push(false);
        }
        v_cols.push(v[j * n..(j + 1) * n].to_vec());
    }
    complete_orthonormal(&mut u_cols, &known);

    let u = Matrix::from_columns(m, &u_cols)?;
    let vm = Matrix::from_columns(n, &v_cols)?;
    let mut triple = if wide {
        SvdTriple {
            left: vm,
            values,
            right: u,
        }
    } else {
        SvdTriple {
            left: u,
            values,
            right: vm,
        }
    };
    normalize_signs(&mut triple);
    Ok(triple)
}

fn subspace_svd<T: Scalar>(
    w: &Matrix<T>,
    t: usize,
    block: usize,
) -> Result<SvdTriple<T>, LinalgError> {
    let (_, k) = w.shape();
    let mut state = START_SEED;
    let start = Matrix::from_fn(k, block, |_, _| T::lit(uniform(&mut state)));
    let (mut q, _) = thin_qr(&start)?;
    let tol = T::epsilon().sqrt() * T::lit(1e-2);
    let mut worst = T::infinity();

    for _ in 0..MAX_SUBSPACE_ITERATIONS {
        let y = matmul(w, &q)?;
        let ritz = jacobi_svd(&y)?;
        let right = matmul(&q, &ritz.right)?;
        let z = w.transpose_matmul(&ritz.left)?;
        let top = ritz.values[0];
        worst = T::zero();
        for i in 0..t {
            let sigma = ritz.values[i];
            let r = (0..k)
                .map(|j| {
                    let e = z[(j, i)] - sigma * right[(j, i)];
                    e * e
                })
                .sum::<T>()
                .sqrt();
            worst = worst.max(r);
        }
        if worst <= tol * top {
            let mut triple = SvdTriple {
                left: ritz.left,
                values: ritz.values,
                right,
            }
            .truncate(t);
            normalize_signs(&mut triple);
            return Ok(triple);
        }
        worst /= top;
        q = thin_qr(&z)?.0;
    }
    Err(LinalgError::NoConvergence {
        iterations: MAX_SUBSPACE_ITERATIONS,
        residual: worst.to_f64_lossy(),
    })
}

/// Flips each singular pair so the largest-magnitude entry of the left vector
/// is positive (first such entry on ties).
pub fn normalize_signs<T: Scalar>(triple: &mut SvdTriple<T>) {
    let (d, t) = triple.left.shape();
    let k = triple.right.rows();
    for j in 0..t {
        let mut best = 0;
        for i in 1..d {
            if triple.left[(i, j)].abs() > triple.left[(best, j)].abs() {
                best = i;
            }
        }
        if triple.left[(best, j)] < T::zero() {
            for i in 0..d {
                triple.left[(i, j)] = -triple.left[(i, j)];
            }
            for i in 0..k {
                triple.right[(i, j)] = -triple.right[(i, j)];
            }
        }
    }
}

fn rotate<T: Scalar>(x: &mut [T], y: &mut [T], c: T, s: T) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// Fills the columns not marked `known` with unit vectors orthogonal to every
/// other column, trying standard basis vectors in order.
fn complete_orthonormal<T: Scalar>(cols: &mut [Vec<T>], known: &[bool]) {
    let m = cols.first().map_or(0, Vec::len);
    let mut next_basis = 0;
    for j in 0..cols.len() {
        if known[j] {
            continue;
        }
        while next_basis < m {
            let mut e = vec![T::zero(); m];
            e[next_basis] = T::one();
            next_basis += 1;
            // Two passes of Gram-Schmidt against everything already fixed.
            for _ in 0..2 {
                for (i, c) in cols.iter().enumerate() {
                    if i == j || (!known[i] && i > j) {
                        continue;
                    }
                    let p = dot(&e, c);
                    for (ei, &ci) in e.iter_mut().zip(c) {
                        *ei -= p * ci;
                    }
                }
            }
            let n = norm2(&e);
            if n > T::lit(0.5) {
                cols[j] = e.into_iter().map(|x| x / n).collect();
                break;
            }
        }
    }
}

/// SplitMix64 mapped to `[-1, 1)`.
fn uniform(state: &mut u64) -> f64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::l1_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn orthonormality_error(m: &Matrix) -> f64 {
        let g = m.transpose_matmul(m).unwrap();
        let i = Matrix::identity(m.cols());
        g.as_slice()
            .iter()
            .zip(i.as_slice())
            .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()))
    }

    #[test]
    fn diagonal_spectrum() {
        let w = Matrix::<f64>::diag(&[5.0, 3.0, 1.0]);
        let svd = truncated_svd(&w, 2).unwrap();
        assert_eq!(svd.values.len(), 2);
        assert!((svd.values[0] - 5.0).abs() < 1e-12);
        assert!((svd.values[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one() {
        let u = [0.6, 0.8, 0.0];
        let v = [1.0 / 2f64.sqrt(), 0.0, -1.0 / 2f64.sqrt(), 0.0];
        let w = Matrix::outer(7.0, &u, &v);
        let svd = truncated_svd(&w, 1).unwrap();
        assert!((svd.values[0] - 7.0).abs() < 1e-12);
        assert!(svd.left[(1, 0)] > 0.0);
    }

    #[test]
    fn rejects_bad_rank() {
        let w = random(4, 3, 0);
        assert!(matches!(
            truncated_svd(&w, 0),
            Err(LinalgError::RankOutOfRange { .. })
        ));
        assert!(matches!(
            truncated_svd(&w, 4),
            Err(LinalgError::RankOutOfRange { max: 3, .. })
        ));
    }

    #[test]
    fn zero_matrix_has_orthonormal_vectors() {
        let w = Matrix::<f64>::zeros(5, 4);
        let svd = truncated_svd(&w, 4).unwrap();
        assert!(svd.values.iter().all(|&s| s == 0.0));
        assert!(orthonormality_error(&svd.left) < 1e-12);
        assert!(orthonormality_error(&svd.right) < 1e-12);
    }

    #[test]
    fn full_rank_reconstruction() {
        for (d, k) in [(8, 6), (6, 8), (1, 5), (5, 1), (12, 12)] {
            let w = random(d, k, (d * 100 + k) as u64);
            let svd = truncated_svd(&w, d.min(k)).unwrap();
            let rel = l1_error(&svd.reconstruct(), &w).unwrap() / w.l1_norm();
            assert!(rel < 1e-12, "{d}x{k}: {rel}");
            assert!(orthonormality_error(&svd.left) < 1e-12);
            assert!(orthonormality_error(&svd.right) < 1e-12);
            assert!(svd.values.windows(2).all(|p| p[0] >= p[1]));
        }
    }

    #[test]
    fn subspace_path_on_low_rank_matrix() {
        // 300x200 of rank 6: forces the iterative path.
        let a = random(300, 6, 11);
        let b = random(6, 200, 12);
        let w = matmul(&a, &b).unwrap();
        let iter = truncated_svd(&w, 8).unwrap();
        let direct = jacobi_svd(&w).unwrap();
        for i in 0..6 {
            let rel = (iter.values[i] - direct.values[i]).abs() / direct.values[i];
            assert!(rel < 1e-10, "sigma {i}: {rel}");
        }
        assert!(iter.values[6] < 1e-10 * iter.values[0]);
        assert!(orthonormality_error(&iter.left) < 1e-9);
        assert!(orthonormality_error(&iter.right) < 1e-9);
    }

    #[test]
    fn subspace_path_on_general_matrix() {
        let w = random(260, 240, 13);
        let iter = truncated_svd(&w, 4).unwrap();
        let direct = jacobi_svd(&w).unwrap();
        for i in 0..4 {
            let rel = (iter.values[i] - direct.values[i]).abs() / direct.values[i];
            assert!(rel < 1e-6, "sigma {i}: {rel}");
        }
    }

    #[test]
    fn f32_path() {
        let w = Matrix::<f32>::diag(&[4.0, 2.0, 1.0]);
        let svd = truncated_svd(&w, 3).unwrap();
        assert!((svd.values[0] - 4.0).abs() < 1e-5);
        assert!((svd.values[2] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn deterministic() {
        let w = random(150, 130, 3);
        let a = truncated_svd(&w, 5).unwrap();
        let b = truncated_svd(&w, 5).unwrap();
        assert_eq!(a, b);
    }
}
