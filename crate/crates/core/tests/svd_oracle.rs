use lorasharp_core::linalg::{jacobi_svd, truncated_svd};
use lorasharp_core::Matrix;
use lorasharp_testkit::{oracle_full_svd, synth_matrix, SyntheticSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn orthonormality_residual(q: &Matrix) -> f64 {
    let g = q.transpose_matmul(q).unwrap();
    let n = g.rows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - want).abs());
        }
    }
    worst
}

fn assert_matches_oracle(w: &Matrix, t: usize, label: &str) {
    let oracle = oracle_full_svd(w).unwrap();
    let got = truncated_svd(w, t).unwrap();
    let scale = oracle.values[0].max(f64::MIN_POSITIVE);
    for i in 0..t {
        let err = (got.values[i] - oracle.values[i]).abs() / scale;
        assert!(
            err <= 1e-6,
            "{label}: σ{i} {} vs oracle {} ({err:e})",
            got.values[i],
            oracle.values[i]
        );
    }
    assert!(
        orthonormality_residual(&got.left) <= 1e-6,
        "{label}: left not orthonormal"
    );
    assert!(
        orthonormality_residual(&got.right) <= 1e-6,
        "{label}: right not orthonormal"
    );
}

#[test]
fn random_matrices_agree_with_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5bd1);
    for trial in 0..100 {
        let rows = rng.random_range(1..=64);
        let cols = rng.random_range(1..=64);
        let w = gaussian(rows, cols, &mut rng);
        assert_matches_oracle(
            &w,
            rows.min(cols),
            &format!("trial {trial} ({rows}x{cols})"),
        );
    }
}

#[test]
fn truncated_subspace_path_agrees_with_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5bd2);
    for trial in 0..10 {
        let rows = rng.random_range(150..=260);
        let cols = rng.random_range(100..=128);
        let profile: Vec<f64> = (0..cols).map(|j| 0.8f64.powi(j as i32) * 10.0).collect();
        let w = synth_matrix(&SyntheticSpec::low_rank(rows, cols, profile, trial));
        assert_matches_oracle(&w, 8, &format!("subspace trial {trial} ({rows}x{cols})"));
    }
}

#[test]
fn rank_deficient_and_degenerate_inputs() {
    let w = synth_matrix(&SyntheticSpec::low_rank(40, 30, vec![5.0, 5.0, 1.0], 9));
    assert_matches_oracle(&w, 30, "repeated values");
    let w = Matrix::from_fn(20, 1, |i, _| i as f64);
    assert_matches_oracle(&w, 1, "single column");
    let s = jacobi_svd(&Matrix::zeros(5, 4)).unwrap();
    assert!(s.values.iter().all(|&v| v == 0.0));
    assert!(orthonormality_residual(&s.right) <= 1e-12);
}

#[test]
fn cluster_wider_than_the_block_converges() {
    for seed in 0..4 {
        let spec = SyntheticSpec::low_rank(128, 128, vec![4.0, 3.0, 2.0, 1.0], seed)
            .with_outliers(0.001, 10.0);
        let w = synth_matrix(&spec);
        assert_matches_oracle(&w, 4, &format!("clustered seed {seed}"));
    }
    let w = Matrix::from_fn(200, 150, |i, j| {
        if i == j && i < 40 {
            1.0 + 1e-9 * i as f64
        } else {
            0.0
        }
    });
    assert_matches_oracle(&w, 8, "forty-fold cluster");
}
