//! Reference computations that share no code with the main decomposition
//! path, so agreement between the two is evidence rather than tautology.

use lorasharp_core::{Matrix, SvdTriple};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("ratios and weights differ in length ({ratios} vs {weights})")]
    LengthMismatch { ratios: usize, weights: usize },
    #[error("weights must be non-negative with a positive sum")]
    NoWeight,
    #[error("oracle is for matrices with min(rows, cols) <= {limit}, got {rows}x{cols}")]
    TooLarge {
        rows: usize,
        cols: usize,
        limit: usize,
    },
    #[error("eigen-iteration did not converge after {sweeps} sweeps (off-diagonal {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },
    #[error("reconstruction error {0:e} exceeds 1e-10 relative")]
    Reconstruction(f64),
}

pub const ORACLE_SVD_LIMIT: usize = 160;
const MAX_SWEEPS: usize = 100;

/// Minimizer of `Σ wᵢ·|ρᵢ − d|` over the breakpoints `ρᵢ`, found by
/// evaluating the objective at every breakpoint. Ties go to the smallest
/// breakpoint.
pub fn weighted_median_oracle(ratios: &[f64], weights: &[f64]) -> Result<f64, OracleError> {
    if ratios.len() != weights.len() {
        return Err(OracleError::LengthMismatch {
            ratios: ratios.len(),
            weights: weights.len(),
        });
    }
    if weights.iter().any(|&w| !(w >= 0.0)) || !(weights.iter().sum::<f64>() > 0.0) {
        return Err(OracleError::NoWeight);
    }
    let objective = |d: f64| -> f64 {
        ratios
            .iter()
            .zip(weights)
            .map(|(&r, &w)| w * (r - d).abs())
            .sum()
    };
    let mut best = f64::INFINITY;
    let mut best_value = f64::INFINITY;
    for &r in ratios {
        let value = objective(r);
        if value < best_value || (value == best_value && r < best) {
            best = r;
            best_value = value;
        }
    }
    Ok(best)
}

/// Full SVD from the eigen-decomposition of the symmetric embedding
/// `[[0, W], [Wᵀ, 0]]`, whose positive eigenvalues are the singular values of
/// `W` with eigenvectors `(u, v)/√2`. Returns `min(rows, cols)` triplets in
/// descending order.
pub fn oracle_full_svd(w: &Matrix) -> Result<SvdTriple, OracleError> {
    let (d, k) = w.shape();
    let t = d.min(k);
    if t > ORACLE_SVD_LIMIT {
        return Err(OracleError::TooLarge {
            rows: d,
            cols: k,
            limit: ORACLE_SVD_LIMIT,
        });
    }
    let n = d + k;
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..d {
        for j in 0..k {
            a[i][d + j] = w[(i, j)];
            a[d + j][i] = w[(i, j)];
        }
    }
    let (values, vectors) = jacobi_eigen(a)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| values[y].total_cmp(&values[x]));
    let mut left = Matrix::zeros(d, t);
    let mut right = Matrix::zeros(k, t);
    let mut sigma = Vec::with_capacity(t);
    for (c, &e) in order.iter().take(t).enumerate() {
        let col: Vec<f64> = (0..n).map(|r| vectors[r][e]).collect();
        let (u, v) = col.split_at(d);
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for i in 0..d {
            left[(i, c)] = if nu > 0.0 { u[i] / nu } else { 0.0 };
        }
        for j in 0..k {
            right[(j, c)] = if nv > 0.0 { v[j] / nv } else { 0.0 };
        }
        sigma.push(values[e].max(0.0));
    }

    let norm = w.frobenius_norm();
    let mut err = 0.0;
    for i in 0..d {
        for j in 0..k {
            let r: f64 = (0..t)
                .map(|c| left[(i, c)] * sigma[c] * right[(j, c)])
                .sum();
            err += (r - w[(i, j)]).powi(2);
        }
    }
    let rel = if norm > 0.0 {
        err.sqrt() / norm
    } else {
        err.sqrt()
    };
    if rel > 1e-10 {
        return Err(OracleError::Reconstruction(rel));
    }
    Ok(SvdTriple {
        left,
        values: sigma,
        right,
    })
}

/// Cyclic two-sided Jacobi for a symmetric matrix. Returns eigenvalues and
/// the eigenvector matrix (eigenvectors in columns).
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> Result<(Vec<f64>, Vec<Vec<f64>>), OracleError> {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let scale: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    let off = |a: &[Vec<f64>]| -> f64 {
        let mut s = 0.0;
        for (i, row) in a.iter().enumerate() {
            for (j, x) in row.iter().enumerate() {
                if i != j {
                    s += x * x;
                }
            }
        }
        s.sqrt()
    };
    let floor = 1e-17 * scale;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p][q];
                if apq.abs() <= floor.max(f64::EPSILON * (a[p][p] * a[q][q]).abs().sqrt()) {
                    continue;
                }
                rotated = true;
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
                for j in 0..n {
                    let (x, y) = (a[p][j], a[q][j]);
                    a[p][j] = c * x - s * y;
                    a[q][j] = s * x + c * y;
                }
                for row in v.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
            }
        }
        if !rotated {
            let values = (0..n).map(|i| a[i][i]).collect();
            return Ok((values, v));
        }
    }
    Err(OracleError::NoConvergence {
        sweeps: MAX_SWEEPS,
        residual: off(&a),
    })
}
