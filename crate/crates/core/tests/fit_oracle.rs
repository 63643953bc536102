use lorasharp_core::mas_svd::{fit_rank1_l1, WEIGHT_FLOOR};
use lorasharp_core::Matrix;
use lorasharp_testkit::weighted_median_oracle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_unit(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.into_iter().map(|v| v / norm).collect()
}

fn oracle_fit(r: &Matrix, u: &[f64], v: &[f64]) -> f64 {
    let mut ratios = Vec::new();
    let mut weights = Vec::new();
    for (i, &ui) in u.iter().enumerate() {
        for (j, &vj) in v.iter().enumerate() {
            let a = ui * vj;
            if a.abs() > WEIGHT_FLOOR {
                ratios.push(r[(i, j)] / a);
                weights.push(a.abs());
            }
        }
    }
    weighted_median_oracle(&ratios, &weights).unwrap()
}

#[test]
fn exact_breakpoint_match_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf17);
    for trial in 0..1000 {
        let d = rng.random_range(1..=24);
        let k = rng.random_range(1..=24);
        let u = random_unit(d, &mut rng);
        let v = random_unit(k, &mut rng);
        let r = if trial % 3 == 0 {
            // Near rank-1 residuals put many ratios close together.
            let s = rng.random_range(-5.0..5.0);
            Matrix::from_fn(d, k, |i, j| s * u[i] * v[j] + rng.random_range(-1e-3..1e-3))
        } else {
            Matrix::from_fn(d, k, |_, _| rng.random_range(-3.0..3.0))
        };
        assert_eq!(
            fit_rank1_l1(&r, &u, &v, None),
            oracle_fit(&r, &u, &v),
            "trial {trial}"
        );
    }
}

#[test]
fn thousand_entry_ratio_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf18);
    for _ in 0..20 {
        let u = vec![1.0];
        let v = random_unit(1000, &mut rng);
        let r = Matrix::from_fn(1, 1000, |_, _| rng.random_range(-10.0..10.0));
        assert_eq!(fit_rank1_l1(&r, &u, &v, None), oracle_fit(&r, &u, &v));
    }
}

#[test]
fn large_grid_takes_the_bracketed_path_and_still_matches() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf19);
    let (d, k) = (300, 240);
    let u = random_unit(d, &mut rng);
    let v = random_unit(k, &mut rng);
    let r = Matrix::from_fn(d, k, |i, j| {
        1.7 * u[i] * v[j] + rng.random_range(-2e-3..2e-3)
    });
    assert_eq!(fit_rank1_l1(&r, &u, &v, None), oracle_fit(&r, &u, &v));
}

#[test]
fn single_large_outlier_does_not_move_the_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf1a);
    for _ in 0..50 {
        let d = rng.random_range(4..40);
        let k = rng.random_range(4..40);
        let u = random_unit(d, &mut rng);
        let v = random_unit(k, &mut rng);
        let scale = rng.random_range(0.5..5.0);
        let mut r = Matrix::from_fn(d, k, |i, j| scale * u[i] * v[j]);
        let (i, j) = (rng.random_range(0..d), rng.random_range(0..k));
        let peak = r.as_slice().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        r[(i, j)] += 1000.0 * peak;
        let fit = fit_rank1_l1(&r, &u, &v, None);
        assert!((fit - scale).abs() <= 1e-9, "{fit} vs {scale}");
    }
}
