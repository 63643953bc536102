//! Seeded low-rank matrices with planted spectra and sparse outliers.

use lorasharp_core::Matrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub rows: usize,
    pub cols: usize,
    pub planted_rank: usize,
    /// Planted singular values; entries past `planted_rank` are ignored.
    pub singular_value_profile: Vec<f64>,
    /// Fraction of entries overwritten by outliers, in `[0, 1]`.
    pub outlier_fraction: f64,
    /// Outlier magnitude as a multiple of the largest planted value.
    pub outlier_magnitude: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn low_rank(rows: usize, cols: usize, profile: Vec<f64>, seed: u64) -> Self {
        Self {
            rows,
            cols,
            planted_rank: profile.len(),
            singular_value_profile: profile,
            outlier_fraction: 0.0,
            outlier_magnitude: 0.0,
            seed,
        }
    }

    pub fn with_outliers(mut self, fraction: f64, magnitude: f64) -> Self {
        self.outlier_fraction = fraction;
        self.outlier_magnitude = magnitude;
        self
    }
}

/// A generated matrix together with its planted structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    /// `U·diag(profile)·Vᵀ` before corruption.
    pub clean: Matrix,
    /// `clean` with outliers written in.
    pub corrupted: Matrix,
    /// Planted left factor (rows × planted_rank), orthonormal columns.
    pub left: Matrix,
    /// Planted right factor (cols × planted_rank), orthonormal columns.
    pub right: Matrix,
    /// Outlier positions `(row, col)` in generation order.
    pub outliers: Vec<(usize, usize)>,
}

pub fn synth_matrix(spec: &SyntheticSpec) -> Matrix {
    synthesize(spec).corrupted
}

pub fn synthesize(spec: &SyntheticSpec) -> Synthetic {
    let SyntheticSpec {
        rows,
        cols,
        planted_rank,
        ..
    } = *spec;
    assert!(
        planted_rank <= rows.min(cols),
        "planted rank exceeds min(rows, cols)"
    );
    assert!(
        spec.singular_value_profile.len() >= planted_rank,
        "profile shorter than planted rank"
    );
    assert!(
        (0.0..=1.0).contains(&spec.outlier_fraction),
        "outlier fraction outside [0, 1]"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let left = random_orthonormal(rows, planted_rank, &mut rng);
    let right = random_orthonormal(cols, planted_rank, &mut rng);
    let profile = &spec.singular_value_profile[..planted_rank];

    let mut clean = Matrix::zeros(rows, cols);
    for (c, &s) in profile.iter().enumerate() {
        for i in 0..rows {
            let li = s * left[(i, c)];
            for j in 0..cols {
                clean[(i, j)] += li * right[(j, c)];
            }
        }
    }

    let total = rows * cols;
    let count = ((spec.outlier_fraction * total as f64).round() as usize).min(total);
    let peak = profile.iter().copied().fold(0.0f64, f64::max);
    let magnitude = spec.outlier_magnitude * peak;
    let mut corrupted = clean.clone();
    let mut outliers = Vec::with_capacity(count);
    for flat in index::sample(&mut rng, total, count) {
        let (i, j) = (flat / cols, flat % cols);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        corrupted[(i, j)] = sign * magnitude;
        outliers.push((i, j));
    }
    Synthetic {
        clean,
        corrupted,
        left,
        right,
        outliers,
    }
}

/// Mean over the first `t` column pairs of `|⟨aᵢ, bᵢ⟩| / (‖aᵢ‖·‖bᵢ‖)`; a zero
/// column counts as cosine 0.
pub fn mean_abs_cosine(a: &Matrix, b: &Matrix, t: usize) -> f64 {
    assert_eq!(a.rows(), b.rows(), "column lengths differ");
    assert!(t >= 1 && t <= a.cols().min(b.cols()), "t out of range");
    let total: f64 = (0..t)
        .map(|c| {
            let (x, y) = (a.column(c), b.column(c));
            let dot: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
            let norms = x.iter().map(|p| p * p).sum::<f64>().sqrt()
                * y.iter().map(|q| q * q).sum::<f64>().sqrt();
            if norms > 0.0 {
                dot.abs() / norms
            } else {
                0.0
            }
        })
        .sum();
    total / t as f64
}

/// `n × r` matrix with orthonormal columns: Gaussian draws orthogonalized by
/// two passes of modified Gram–Schmidt.
pub fn random_orthonormal(n: usize, r: usize, rng: &mut impl Rng) -> Matrix {
    assert!(
        r <= n,
        "cannot fit {r} orthonormal columns in dimension {n}"
    );
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(r);
    while cols.len() < r {
        let mut x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for q in &cols {
                let p: f64 = x.iter().zip(q).map(|(a, b)| a * b).sum();
                for (xi, qi) in x.iter_mut().zip(q) {
                    *xi -= p * qi;
                }
            }
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-8 {
            cols.push(x.into_iter().map(|v| v / norm).collect());
        }
    }
    Matrix::from_fn(n, r, |i, j| cols[j][i])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_cases() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![-3.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(mean_abs_cosine(&a, &b, 1), 1.0);
        assert!((mean_abs_cosine(&a, &b, 2) - (1.0 + 0.5f64.sqrt()) / 2.0).abs() < 1e-15);
        assert_eq!(mean_abs_cosine(&Matrix::zeros(2, 1), &b, 1), 0.0);
    }

    #[test]
    fn exact_rank_one() {
        let m = synth_matrix(&SyntheticSpec::low_rank(6, 5, vec![3.0], 1));
        for i in 1..6 {
            for j in 1..5 {
                let minor = m[(0, 0)] * m[(i, j)] - m[(0, j)] * m[(i, 0)];
                assert!(minor.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_profile_is_outliers_only() {
        let spec = SyntheticSpec::low_rank(10, 10, vec![0.0, 0.0], 2).with_outliers(0.1, 5.0);
        let s = synthesize(&spec);
        assert!(s.clean.is_zero());
        assert_eq!(s.outliers.len(), 10);
        assert!(s.corrupted.as_slice().iter().all(|&x| x == 0.0));
        let spec = SyntheticSpec::low_rank(10, 10, vec![0.0, 0.0], 2).with_outliers(0.1, 5.0);
        assert_eq!(synthesize(&spec).outliers, s.outliers);
    }

    #[test]
    fn outliers_scale_with_peak() {
        let spec = SyntheticSpec::low_rank(20, 20, vec![2.0, 1.0], 3).with_outliers(0.05, 10.0);
        let s = synthesize(&spec);
        assert_eq!(s.outliers.len(), 20);
        for &(i, j) in &s.outliers {
            assert_eq!(s.corrupted[(i, j)].abs(), 20.0);
        }
    }

    #[test]
    fn reproducible_from_seed() {
        let spec = SyntheticSpec::low_rank(12, 9, vec![4.0, 2.0, 1.0], 99).with_outliers(0.02, 3.0);
        assert_eq!(synth_matrix(&spec), synth_matrix(&spec));
        let other = SyntheticSpec {
            seed: 100,
            ..spec.clone()
        };
        assert_ne!(synth_matrix(&spec), synth_matrix(&other));
    }

    #[test]
    fn orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_orthonormal(30, 6, &mut rng);
        let g = q.transpose_matmul(&q).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g[(i, j)] - want).abs() < 1e-13);
            }
        }
    }
}
