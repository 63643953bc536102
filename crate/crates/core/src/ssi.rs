//! Spectral sharpness index, layer ranking and pruning.
//!
//! `SSI = σ′₁ / (σ′₁ + … + σ′ₕ + ε)` over the rescaled singular values of a
//! layer update. Layers are ranked by SSI, highest first, and the top τ are
//! pruned by zeroing both LoRA factors.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterBundle, AdapterError, LayerId, LoraLayer};
use crate::mas_svd::{mas_svd, MasSvdConfig};
use crate::scalar::Scalar;

pub const DEFAULT_TAU: usize = 10;

#[derive(Debug, Error)]
pub enum SsiError {
    #[error("h must be at least 1")]
    InvalidH,
    #[error("epsilon must be positive, got {0}")]
    InvalidEpsilon(f64),
    #[error("adapter has no usable LoRA layers")]
    NoLayers,
    #[error("cannot start worker pool: {0}")]
    Pool(String),
    #[error("plan names layers not in the adapter: {}", list(.0))]
    UnknownLayers(Vec<LayerId>),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

fn list(ids: &[LayerId]) -> String {
    ids.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sharpness<T = f64> {
    pub value: T,
    pub sigma_top: T,
    /// Sum of the first `h_used` values.
    pub sigma_sum: T,
    pub h_used: usize,
    /// The spectrum was empty; `value` is 0.
    pub empty_spectrum: bool,
}

/// `s[0] / (s[0] + … + s[min(h, len) − 1] + ε)` for a nonincreasing,
/// nonnegative spectrum.
pub fn spectral_sharpness_index<T: Scalar>(
    s: &[T],
    h: usize,
    epsilon: T,
) -> Result<Sharpness<T>, SsiError> {
    if h == 0 {
        return Err(SsiError::InvalidH);
    }
    if !(epsilon > T::zero()) {
        return Err(SsiError::InvalidEpsilon(epsilon.to_f64_lossy()));
    }
    let Some(&sigma_top) = s.first() else {
        return Ok(Sharpness {
            value: T::zero(),
            sigma_top: T::zero(),
            sigma_sum: T::zero(),
            h_used: 0,
            empty_spectrum: true,
        });
    };
    let h_used = h.min(s.len());
    let sigma_sum: T = s[..h_used].iter().copied().sum();
    Ok(Sharpness {
        value: sigma_top / (sigma_sum + epsilon),
        sigma_top,
        sigma_sum,
        h_used,
        empty_spectrum: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerScore {
    pub layer_id: LayerId,
    pub module: String,
    pub ssi: f64,
    pub sigma_top: f64,
    pub sigma_sum: f64,
    pub h_used: usize,
    pub r_bar: f64,
    pub c_bar: f64,
    pub singular_values: Vec<f64>,
    pub rescaled_values: Vec<f64>,
    pub components_extracted: usize,
    /// The materialized update was identically zero.
    pub zero_update: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerFailure {
    pub layer_id: LayerId,
    pub module: String,
    pub message: String,
}

/// Scores in rank order plus the layers that could not be scored.
#[derive(Debug, Clone, PartialEq)]
pub struct SharpnessReport {
    pub scores: Vec<LayerScore>,
    pub failures: Vec<LayerFailure>,
    pub epsilon: f64,
    pub h: usize,
}

impl SharpnessReport {
    pub fn ranking(&self) -> Vec<LayerId> {
        self.scores.iter().map(|s| s.layer_id.clone()).collect()
    }

    pub fn score(&self, id: &LayerId) -> Option<&LayerScore> {
        self.scores.iter().find(|s| &s.layer_id == id)
    }
}

/// Ranking order: SSI descending, zero updates after nonzero ones, then
/// block ascending and Q < K < V < O < other modules.
pub fn rank_order(a: &LayerScore, b: &LayerScore) -> Ordering {
    b.ssi
        .total_cmp(&a.ssi)
        .then(a.zero_update.cmp(&b.zero_update))
        .then_with(|| a.layer_id.cmp(&b.layer_id))
}

/// Scores every layer of `bundle`. Layers are decomposed concurrently on
/// `workers` threads (all cores when `None`); the report does not depend on
/// the worker count.
pub fn score_adapter<T: Scalar>(
    bundle: &AdapterBundle<T>,
    cfg: &MasSvdConfig,
    h: usize,
    workers: Option<usize>,
) -> Result<SharpnessReport, SsiError> {
    if h == 0 {
        return Err(SsiError::InvalidH);
    }
    if !(cfg.epsilon > 0.0) {
        return Err(SsiError::InvalidEpsilon(cfg.epsilon));
    }
    if bundle.layers().is_empty() {
        return Err(SsiError::NoLayers);
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build().map_err(|e| SsiError::Pool(e.to_string()))?;
    let results: Vec<Result<LayerScore, LayerFailure>> = pool.install(|| {
        bundle
            .layers()
            .par_iter()
            .map(|l| score_layer(bundle, l, cfg, h))
            .collect()
    });

    let mut scores = Vec::with_capacity(results.len());
    let mut failures: Vec<LayerFailure> = bundle
        .faults()
        .iter()
        .map(|f| LayerFailure {
            layer_id: f.id.clone(),
            module: f.module.clone(),
            message: f.message.clone(),
        })
        .collect();
    for r in results {
        match r {
            Ok(s) => scores.push(s),
            Err(f) => failures.push(f),
        }
    }
    scores.sort_by(rank_order);
    failures.sort_by(|a, b| a.layer_id.cmp(&b.layer_id));
    Ok(SharpnessReport {
        scores,
        failures,
        epsilon: cfg.epsilon,
        h,
    })
}

fn score_layer<T: Scalar>(
    bundle: &AdapterBundle<T>,
    layer: &LoraLayer<T>,
    cfg: &MasSvdConfig,
    h: usize,
) -> Result<LayerScore, LayerFailure> {
    let fail = |message: String| LayerFailure {
        layer_id: layer.id.clone(),
        module: layer.module.clone(),
        message,
    };
    let dw = bundle.delta_w(layer);
    if !dw.is_finite() {
        return Err(fail("update has non-finite entries".into()));
    }
    let zero_update = dw.is_zero();
    let spectral = mas_svd(&dw, cfg).map_err(|e| fail(e.to_string()))?;
    drop(dw);
    let sharp = spectral_sharpness_index(&spectral.rescaled_values, h, T::lit(cfg.epsilon))
        .map_err(|e| fail(e.to_string()))?;
    let to_f64 = |v: &[T]| v.iter().map(|x| x.to_f64_lossy()).collect();
    Ok(LayerScore {
        layer_id: layer.id.clone(),
        module: layer.module.clone(),
        ssi: sharp.value.to_f64_lossy(),
        sigma_top: sharp.sigma_top.to_f64_lossy(),
        sigma_sum: sharp.sigma_sum.to_f64_lossy(),
        h_used: sharp.h_used,
        r_bar: spectral.avg_row_norm.to_f64_lossy(),
        c_bar: spectral.avg_col_norm.to_f64_lossy(),
        singular_values: to_f64(&spectral.singular_values),
        rescaled_values: to_f64(&spectral.rescaled_values),
        components_extracted: spectral.components_extracted,
        zero_update,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub tau: usize,
    /// Lowest SSI among the pruned layers; `None` for an empty plan.
    pub cutoff_ssi: Option<f64>,
    /// Pruned layers, highest SSI first.
    pub pruned_layers: Vec<LayerId>,
}

/// Takes the first `min(tau, n)` layers of the ranking.
pub fn build_pruning_plan(report: &SharpnessReport, tau: usize) -> PruningPlan {
    let chosen = &report.scores[..tau.min(report.scores.len())];
    PruningPlan {
        tau,
        cutoff_ssi: chosen.last().map(|s| s.ssi),
        pruned_layers: chosen.iter().map(|s| s.layer_id.clone()).collect(),
    }
}

/// Returns a copy of `bundle` with both factors of every planned layer set to
/// zero in their original dtype. Every other tensor is left untouched.
pub fn apply_pruning<T: Scalar>(
    bundle: &AdapterBundle<T>,
    plan: &PruningPlan,
) -> Result<AdapterBundle<T>, SsiError> {
    let unknown: Vec<LayerId> = plan
        .pruned_layers
        .iter()
        .filter(|id| bundle.layer(id).is_none())
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(SsiError::UnknownLayers(unknown));
    }
    let mut out = bundle.clone();
    for id in &plan.pruned_layers {
        out.zero_layer(id)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{AdapterConfig, Dtype, LoadOptions, Projection, SafeTensors};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    #[test]
    fn formula_examples() {
        let s = spectral_sharpness_index::<f64>(&[7.0, 0.0, 0.0], 3, 1e-6).unwrap();
        assert_eq!(s.value, 7.0 / (7.0 + 1e-6));
        assert!((s.value - 0.99999986).abs() < 1e-8);
        let s = spectral_sharpness_index::<f64>(&[2.0; 4], 4, 1e-6).unwrap();
        assert!((s.value - 0.25).abs() < 1e-7 && s.value < 0.25);
        let empty = spectral_sharpness_index::<f64>(&[], 3, 1e-6).unwrap();
        assert!(empty.empty_spectrum && empty.value == 0.0);
        assert_eq!(
            spectral_sharpness_index(&[0.0, 0.0], 2, 1e-6)
                .unwrap()
                .value,
            0.0
        );
        assert!(spectral_sharpness_index(&[1.0], 0, 1e-6).is_err());
        assert!(spectral_sharpness_index(&[1.0], 1, 0.0).is_err());
    }

    #[test]
    fn truncates_to_h() {
        let s = spectral_sharpness_index(&[4.0, 3.0, 2.0, 1.0], 2, 1e-6).unwrap();
        assert_eq!(s.h_used, 2);
        assert_eq!(s.sigma_sum, 7.0);
        let s = spectral_sharpness_index(&[4.0, 3.0], 8, 1e-6).unwrap();
        assert_eq!(s.h_used, 2);
    }

    #[test]
    fn matches_direct_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let n = rng.random_range(1..12);
            let mut s: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
            s.sort_by(|a, b| b.total_cmp(a));
            let h = rng.random_range(1..15);
            let mut total = 0.0;
            for x in s.iter().take(h) {
                total += x;
            }
            let expected = s[0] / (total + 1e-6);
            let got = spectral_sharpness_index(&s, h, 1e-6).unwrap().value;
            assert!((got - expected).abs() <= 1e-15 * expected.max(1.0));
        }
    }

    fn spectrum() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..100.0, 1..10).prop_map(|mut v| {
            v.sort_by(|a, b| b.total_cmp(a));
            v
        })
    }

    proptest! {
        #[test]
        fn bounded(s in spectrum(), h in 1usize..12) {
            let eps = 1e-6;
            let v = spectral_sharpness_index(&s, h, eps).unwrap().value;
            prop_assert!((0.0..1.0).contains(&v));
            if s[0] > 0.0 && s.len() >= h {
                let hf = h as f64;
                let delta = eps / (hf * (hf * s[0] + eps));
                prop_assert!(v >= 1.0 / hf - delta - 1e-15);
            }
        }

        #[test]
        fn increasing_in_top_value(s in spectrum(), bump in 1e-3f64..10.0) {
            let h = s.len();
            let base = spectral_sharpness_index(&s, h, 1e-6).unwrap().value;
            let mut t = s.clone();
            t[0] += bump;
            prop_assert!(spectral_sharpness_index(&t, h, 1e-6).unwrap().value > base);
        }

        #[test]
        fn scale_invariant_up_to_epsilon(s in spectrum(), c in 0.01f64..100.0) {
            prop_assume!(s[0] > 1e-3);
            let h = s.len();
            let scaled: Vec<f64> = s.iter().map(|x| x * c).collect();
            let a = spectral_sharpness_index(&s, h, 1e-12).unwrap().value;
            let b = spectral_sharpness_index(&scaled, h, 1e-12).unwrap().value;
            prop_assert!((a - b).abs() < 1e-8);
        }
    }

    fn flat(n: usize, pattern: u64) -> Vec<f64> {
        let s = 1.0 / (n as f64).sqrt();
        (0..n)
            .map(|i| {
                if (pattern >> (i % 64)) & 1 == 1 {
                    -s
                } else {
                    s
                }
            })
            .collect()
    }

    /// One `q_proj` layer per entry, block `i`, with `lora_B · lora_A` equal
    /// to the given (out × r, r × in) pair.
    fn bundle(layers: Vec<(Vec<f64>, Vec<f64>, usize, usize, usize)>) -> AdapterBundle<f64> {
        let mut tensors = Vec::new();
        let mut rank = 1;
        for (i, (a, b, out, r, inn)) in layers.into_iter().enumerate() {
            rank = r;
            let base = format!("model.layers.{i}.self_attn.q_proj");
            tensors.push((
                format!("{base}.lora_A.weight"),
                Dtype::F32,
                vec![r, inn],
                Dtype::F32.encode(&b),
            ));
            tensors.push((
                format!("{base}.lora_B.weight"),
                Dtype::F32,
                vec![out, r],
                Dtype::F32.encode(&a),
            ));
        }
        let st = SafeTensors::from_tensors(tensors, BTreeMap::new()).unwrap();
        let cfg =
            AdapterConfig::parse(&format!(r#"{{"r": {rank}, "lora_alpha": {rank}}}"#)).unwrap();
        AdapterBundle::from_container(st, Some(cfg), &LoadOptions::default()).unwrap()
    }

    fn rank_one_layer(scale: f64, pattern: u64) -> (Vec<f64>, Vec<f64>, usize, usize, usize) {
        let u: Vec<f64> = flat(16, pattern).iter().map(|x| x * scale).collect();
        (u, flat(12, pattern.rotate_left(7)), 16, 1, 12)
    }

    /// `I₈` padded: A = [I; 0] (16×8), B = [I 0] (8×12).
    fn isotropic_layer(scale: f64) -> (Vec<f64>, Vec<f64>, usize, usize, usize) {
        let a = (0..16 * 8)
            .map(|i| if i / 8 == i % 8 { scale } else { 0.0 })
            .collect();
        let b = (0..8 * 12)
            .map(|i| if i / 12 == i % 12 { 1.0 } else { 0.0 })
            .collect();
        (a, b, 16, 8, 12)
    }

    #[test]
    fn rank_one_layer_is_sharp() {
        let b = bundle(vec![rank_one_layer(5.0, 0xa5a5)]);
        let report = score_adapter(&b, &MasSvdConfig::for_rank(1), 1, Some(1)).unwrap();
        assert_eq!(report.scores.len(), 1);
        let s = report.scores[0].ssi;
        assert!(s > 0.9999 && s < 1.0, "{s}");
    }

    #[test]
    fn rank_one_outranks_isotropic() {
        let mut layers = vec![isotropic_layer(3.0), rank_one_layer(1.0, 0x3c3c)];
        // Pad the rank-1 factors to the shared rank of 8.
        let (a, b, out, _, inn) = layers.pop().unwrap();
        let mut a8 = vec![0.0; out * 8];
        let mut b8 = vec![0.0; 8 * inn];
        for i in 0..out {
            a8[i * 8] = a[i];
        }
        b8[..inn].copy_from_slice(&b);
        layers.push((a8, b8, out, 8, inn));
        let bun = bundle(layers);
        let report = score_adapter(&bun, &MasSvdConfig::for_rank(8), 8, Some(2)).unwrap();
        assert_eq!(report.ranking()[0], LayerId::new(1, Projection::Q));
        assert!(report.scores[1].ssi < 0.2);
    }

    #[test]
    fn zero_layers_rank_by_tie_break() {
        let zero = || (vec![0.0; 16], vec![0.0; 12], 16, 1, 12);
        let b = bundle(vec![zero(), zero(), zero()]);
        let report = score_adapter(&b, &MasSvdConfig::for_rank(1), 1, None).unwrap();
        assert!(report.scores.iter().all(|s| s.ssi == 0.0 && s.zero_update));
        let blocks: Vec<usize> = report.ranking().iter().map(|id| id.block).collect();
        assert_eq!(blocks, [0, 1, 2]);
    }

    #[test]
    fn zero_updates_rank_last() {
        let mut zero = LayerScore {
            layer_id: LayerId::new(0, Projection::Q),
            module: String::new(),
            ssi: 0.0,
            sigma_top: 0.0,
            sigma_sum: 0.0,
            h_used: 1,
            r_bar: 0.0,
            c_bar: 0.0,
            singular_values: vec![],
            rescaled_values: vec![],
            components_extracted: 1,
            zero_update: true,
        };
        let mut tiny = zero.clone();
        tiny.layer_id = LayerId::new(5, Projection::O);
        tiny.zero_update = false;
        zero.zero_update = true;
        assert_eq!(rank_order(&tiny, &zero), Ordering::Less);
    }

    #[test]
    fn plans() {
        let b = bundle(vec![
            rank_one_layer(1.0, 1),
            isotropic_layer(1.0),
            rank_one_layer(2.0, 7),
        ]);
        let b = AdapterBundle::<f64>::from_container(
            b.container().clone(),
            Some(AdapterConfig::parse(r#"{"r": 8, "lora_alpha": 8}"#).unwrap()),
            &LoadOptions::default(),
        );
        // Mixed ranks against a declared rank of 8: the rank-1 layers fault.
        let b = b.unwrap();
        assert_eq!(b.faults().len(), 2);
        let report = score_adapter(&b, &MasSvdConfig::for_rank(8), 8, None).unwrap();
        assert_eq!(report.failures.len(), 2);
        assert_eq!(report.scores.len(), 1);

        let b = bundle(vec![
            rank_one_layer(1.0, 1),
            rank_one_layer(2.0, 7),
            rank_one_layer(3.0, 9),
        ]);
        let report = score_adapter(&b, &MasSvdConfig::for_rank(1), 1, None).unwrap();
        let empty = build_pruning_plan(&report, 0);
        assert!(empty.pruned_layers.is_empty() && empty.cutoff_ssi.is_none());
        let all = build_pruning_plan(&report, 10);
        assert_eq!(all.pruned_layers.len(), 3);
        assert_eq!(all.cutoff_ssi, Some(report.scores[2].ssi));
        let two = build_pruning_plan(&report, 2);
        assert_eq!(two.pruned_layers, report.ranking()[..2]);
    }

    #[test]
    fn pruning_zeroes_and_is_idempotent() {
        let b = bundle(vec![
            rank_one_layer(1.0, 1),
            rank_one_layer(2.0, 7),
            rank_one_layer(3.0, 9),
        ]);
        let report = score_adapter(&b, &MasSvdConfig::for_rank(1), 1, None).unwrap();
        let plan = build_pruning_plan(&report, 1);
        let once = apply_pruning(&b, &plan).unwrap();
        let twice = apply_pruning(&once, &plan).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once.container().to_bytes(), twice.container().to_bytes());
        let rescored = score_adapter(&once, &MasSvdConfig::for_rank(1), 1, None).unwrap();
        assert_eq!(rescored.score(&plan.pruned_layers[0]).unwrap().ssi, 0.0);

        let untouched = apply_pruning(&b, &build_pruning_plan(&report, 0)).unwrap();
        assert_eq!(untouched.container().to_bytes(), b.container().to_bytes());

        let bad = PruningPlan {
            tau: 1,
            cutoff_ssi: None,
            pruned_layers: vec![LayerId::new(7, Projection::V)],
        };
        match apply_pruning(&b, &bad) {
            Err(SsiError::UnknownLayers(ids)) => assert_eq!(ids, bad.pruned_layers),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn report_independent_of_workers() {
        let b = bundle(vec![
            isotropic_layer(1.0),
            isotropic_layer(2.0),
            isotropic_layer(0.5),
            isotropic_layer(4.0),
        ]);
        let cfg = MasSvdConfig::for_rank(8);
        assert_eq!(
            score_adapter(&b, &cfg, 8, Some(1)).unwrap(),
            score_adapter(&b, &cfg, 8, Some(4)).unwrap()
        );
    }
}
