//! Magnitude-aware, spherically normalized robust SVD.
//!
//! The pipeline for one update matrix `ΔW` (d×k):
//!
//! 1. row-normalize `ΔW` to `W̃`, then column-normalize `W̃` to `Ŵ`
//!    (each row/column divided by its L2 norm plus `ε`);
//! 2. take the top-M right singular vectors of `W̃` and the top-M left
//!    singular vectors of `Ŵ` as candidate directions;
//! 3. greedily extract M rank-1 terms `d·u·vᵀ` from `ΔW`, each the candidate
//!    pair and scale with the smallest L1 error against the current residual;
//! 4. take the SVD of the sum of those terms and rescale its singular values
//!    by the average row norm times the average column norm of `ΔW`.

mod robust_fit;

pub use robust_fit::{
    deflate, fit_rank1_l1, weighted_lower_quantile, LowRankExpansion, RankOneComponent,
    WEIGHT_FLOOR,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{col_l2_norms, row_l2_norms, truncated_svd, LinalgError, Matrix};
use crate::scalar::Scalar;

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MasSvdError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("update matrix has non-finite entries")]
    NonFinite,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MasSvdConfig {
    /// Stabilizer added to every row/column norm.
    pub epsilon: f64,
    /// Number of rank-1 terms extracted (M).
    pub num_components: usize,
    /// Candidate directions kept per side; clamped to `min(d, k)`.
    pub candidate_width: usize,
    /// Upper bound on the entries of the stratified grid the deflation runs
    /// on; `None` uses every entry.
    pub fit_subsample: Option<usize>,
}

impl MasSvdConfig {
    /// Defaults for an adapter of LoRA rank `rank`: M and the candidate width
    /// both equal the rank.
    pub fn for_rank(rank: usize) -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            num_components: rank,
            candidate_width: rank,
            fit_subsample: None,
        }
    }

    pub fn validate(&self) -> Result<(), MasSvdError> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(MasSvdError::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.num_components == 0 {
            return Err(MasSvdError::InvalidConfig(
                "num_components must be at least 1".into(),
            ));
        }
        if self.candidate_width == 0 {
            return Err(MasSvdError::InvalidConfig(
                "candidate_width must be at least 1".into(),
            ));
        }
        if self.fit_subsample == Some(0) {
            return Err(MasSvdError::InvalidConfig(
                "fit_subsample must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Decomposition of one update matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralResult<T = f64> {
    /// Singular values of the robust reconstruction.
    pub singular_values: Vec<T>,
    /// `singular_values · r̄ · c̄`.
    pub rescaled_values: Vec<T>,
    pub left_vectors: Matrix<T>,
    pub right_vectors: Matrix<T>,
    pub avg_row_norm: T,
    pub avg_col_norm: T,
    pub components_extracted: usize,
}

/// Divides row `i` by `‖row i‖₂ + ε`.
pub fn row_normalize<T: Scalar>(dw: &Matrix<T>, epsilon: T) -> Matrix<T> {
    let mut out = dw.clone();
    row_normalize_in_place(&mut out, epsilon);
    out
}

fn row_normalize_in_place<T: Scalar>(w: &mut Matrix<T>, epsilon: T) {
    let norms = row_l2_norms(w);
    for (i, n) in norms.into_iter().enumerate() {
        let denom = n + epsilon;
        for x in w.row_mut(i) {
            *x /= denom;
        }
    }
}

/// Divides column `j` by `‖column j‖₂ + ε`.
pub fn col_normalize<T: Scalar>(wt: &Matrix<T>, epsilon: T) -> Matrix<T> {
    let mut out = wt.clone();
    col_normalize_in_place(&mut out, epsilon);
    out
}

fn col_normalize_in_place<T: Scalar>(w: &mut Matrix<T>, epsilon: T) {
    let denoms: Vec<T> = col_l2_norms(w).into_iter().map(|n| n + epsilon).collect();
    for i in 0..w.rows() {
        for (x, &d) in w.row_mut(i).iter_mut().zip(&denoms) {
            *x /= d;
        }
    }
}

/// Candidate directions: the top-`m` left singular vectors of the fully
/// normalized `wh`, and the top-`m` right singular vectors of the
/// row-normalized `wt`.
pub fn candidate_vectors<T: Scalar>(
    wt: &Matrix<T>,
    wh: &Matrix<T>,
    m: usize,
) -> Result<(Vec<Vec<T>>, Vec<Vec<T>>), LinalgError> {
    let left = truncated_svd(wh, m)?;
    let right = truncated_svd(wt, m)?;
    Ok((
        (0..m).map(|i| left.left_vector(i)).collect(),
        (0..m).map(|i| right.right_vector(i)).collect(),
    ))
}

/// Mean row L2 norm and mean column L2 norm.
pub fn average_norms<T: Scalar>(dw: &Matrix<T>) -> (T, T) {
    let mean = |v: Vec<T>| {
        if v.is_empty() {
            T::zero()
        } else {
            let n = T::from_count(v.len());
            v.into_iter().sum::<T>() / n
        }
    };
    (mean(row_l2_norms(dw)), mean(col_l2_norms(dw)))
}

pub fn magnitude_rescale<T: Scalar>(s: &[T], avg_row_norm: T, avg_col_norm: T) -> Vec<T> {
    s.iter().map(|&x| x * avg_row_norm * avg_col_norm).collect()
}

/// Robust rank-M reconstruction `Σ d_m·u_m·v_mᵀ` of `dw`, in factored form.
pub fn robust_expansion<T: Scalar>(
    dw: &Matrix<T>,
    cfg: &MasSvdConfig,
) -> Result<LowRankExpansion<T>, MasSvdError> {
    cfg.validate()?;
    if !dw.is_finite() {
        return Err(MasSvdError::NonFinite);
    }
    let (d, k) = dw.shape();
    if d == 0 || k == 0 {
        return Err(MasSvdError::InvalidConfig(format!("empty {d}x{k} update")));
    }
    let width = cfg.candidate_width.min(d.min(k));
    let epsilon = T::lit(cfg.epsilon);

    let mut scratch = dw.clone();
    row_normalize_in_place(&mut scratch, epsilon);
    let right_svd = truncated_svd(&scratch, width)?;
    col_normalize_in_place(&mut scratch, epsilon);
    let left_svd = truncated_svd(&scratch, width)?;
    drop(scratch);

    let left = (0..width).map(|i| left_svd.left_vector(i)).collect();
    let right = (0..width).map(|i| right_svd.right_vector(i)).collect();
    Ok(deflate(
        dw,
        left,
        right,
        cfg.num_components,
        cfg.fit_subsample,
    ))
}

/// Dense form of [`robust_expansion`].
pub fn robust_low_rank<T: Scalar>(
    dw: &Matrix<T>,
    cfg: &MasSvdConfig,
) -> Result<Matrix<T>, MasSvdError> {
    Ok(robust_expansion(dw, cfg)?.to_matrix())
}

/// Full decomposition of one update matrix. The final SVD keeps
/// `min(M, d, k)` triplets.
pub fn mas_svd<T: Scalar>(
    dw: &Matrix<T>,
    cfg: &MasSvdConfig,
) -> Result<SpectralResult<T>, MasSvdError> {
    let expansion = robust_expansion(dw, cfg)?;
    let (d, k) = dw.shape();
    let svd = expansion.svd(cfg.num_components.min(d.min(k)))?;
    let (avg_row_norm, avg_col_norm) = average_norms(dw);
    Ok(SpectralResult {
        rescaled_values: magnitude_rescale(&svd.values, avg_row_norm, avg_col_norm),
        singular_values: svd.values,
        left_vectors: svd.left,
        right_vectors: svd.right,
        avg_row_norm,
        avg_col_norm,
        components_extracted: expansion.components.len(),
    })
}
