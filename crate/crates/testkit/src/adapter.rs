//! Synthetic LoRA checkpoints with planted per-layer spectra, written through
//! the real container writer.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lorasharp_core::adapter::{Dtype, LayerId, Projection, SafeTensors, CONFIG_FILE_NAME};
use lorasharp_core::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use crate::synth::random_orthonormal;

pub const ADAPTER_FILE_NAME: &str = "adapter_model.safetensors";

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSpec {
    pub num_blocks: usize,
    /// Module names inside each block, e.g. `q_proj`.
    pub modules: Vec<String>,
    pub out_dim: usize,
    pub in_dim: usize,
    pub rank: usize,
    /// Planted singular values of `A·B` per layer, block-major in `modules`
    /// order. A single profile is used for every layer.
    pub profiles: Vec<Vec<f64>>,
    pub alpha: f64,
    pub dtype: Dtype,
    pub seed: u64,
    /// Reuse one pair of singular-vector bases for every layer.
    pub share_factors: bool,
}

impl AdapterSpec {
    /// q/k/v/o in every block, F32, `alpha = rank` (unit scaling).
    pub fn new(
        num_blocks: usize,
        out_dim: usize,
        in_dim: usize,
        rank: usize,
        profiles: Vec<Vec<f64>>,
        seed: u64,
    ) -> Self {
        Self {
            num_blocks,
            modules: ["q_proj", "k_proj", "v_proj", "o_proj"]
                .map(String::from)
                .to_vec(),
            out_dim,
            in_dim,
            rank,
            profiles,
            alpha: rank as f64,
            dtype: Dtype::F32,
            seed,
            share_factors: false,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.num_blocks * self.modules.len()
    }

    pub fn layer_ids(&self) -> Vec<LayerId> {
        (0..self.num_blocks)
            .flat_map(|b| {
                self.modules.iter().map(move |m| {
                    LayerId::new(b, Projection::from_module_path(&format!("self_attn.{m}")))
                })
            })
            .collect()
    }

    pub fn profile(&self, layer: usize) -> &[f64] {
        if self.profiles.len() == 1 {
            &self.profiles[0]
        } else {
            &self.profiles[layer]
        }
    }

    pub fn tensor_base(block: usize, module: &str) -> String {
        format!("base_model.model.model.layers.{block}.self_attn.{module}")
    }
}

/// `scale · γʲ` for `j < rank`.
pub fn geometric_profile(rank: usize, gamma: f64, scale: f64) -> Vec<f64> {
    (0..rank).map(|j| scale * gamma.powi(j as i32)).collect()
}

/// Unit-scale geometric profile whose planted SSI `σ₁ / Σσ` equals `ssi`,
/// found by bisection on `γ ∈ [0, 1]`.
pub fn profile_with_ssi(rank: usize, ssi: f64) -> Vec<f64> {
    assert!(
        ssi > 1.0 / rank as f64 && ssi <= 1.0,
        "ssi outside (1/rank, 1]"
    );
    let planted = |g: f64| 1.0 / geometric_profile(rank, g, 1.0).iter().sum::<f64>();
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if planted(mid) > ssi {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    geometric_profile(rank, lo, 1.0)
}

/// A checkpoint on disk together with what was planted in it.
#[derive(Debug)]
pub struct SyntheticAdapter {
    _dir: Option<TempDir>,
    pub dir: PathBuf,
    pub adapter_path: PathBuf,
    pub config_path: PathBuf,
    pub spec: AdapterSpec,
}

/// Writes a synthetic adapter into a fresh temporary directory.
pub fn synth_adapter(spec: &AdapterSpec) -> std::io::Result<SyntheticAdapter> {
    let dir = tempfile::tempdir()?;
    let mut out = write_adapter(dir.path(), spec)?;
    out._dir = Some(dir);
    Ok(out)
}

/// Writes `adapter_model.safetensors` and `adapter_config.json` into `dir`.
///
/// Layer `ℓ` stores `lora_B = U·diag(σ)` (out × r) and `lora_A = Vᵀ`
/// (r × in) with seeded orthonormal `U`, `V`, so `A·B` has singular values
/// `σ` (zero-padded to the rank) up to storage rounding.
pub fn write_adapter(dir: &Path, spec: &AdapterSpec) -> std::io::Result<SyntheticAdapter> {
    assert!(
        spec.profiles.len() == 1 || spec.profiles.len() == spec.num_layers(),
        "one profile, or one per layer"
    );
    assert!(
        spec.rank <= spec.out_dim.min(spec.in_dim),
        "rank exceeds layer dimensions"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shared = spec.share_factors.then(|| {
        (
            random_orthonormal(spec.out_dim, spec.rank, &mut rng),
            random_orthonormal(spec.in_dim, spec.rank, &mut rng),
        )
    });
    let mut tensors = Vec::with_capacity(2 * spec.num_layers());
    let mut layer = 0;
    for block in 0..spec.num_blocks {
        for module in &spec.modules {
            let (u, v) = match &shared {
                Some((u, v)) => (u.clone(), v.clone()),
                None => (
                    random_orthonormal(spec.out_dim, spec.rank, &mut rng),
                    random_orthonormal(spec.in_dim, spec.rank, &mut rng),
                ),
            };
            let profile = spec.profile(layer);
            assert!(profile.len() <= spec.rank, "profile longer than rank");
            let sigma = |j: usize| profile.get(j).copied().unwrap_or(0.0);
            let lora_b = Matrix::from_fn(spec.out_dim, spec.rank, |i, j| u[(i, j)] * sigma(j));
            let lora_a = Matrix::from_fn(spec.rank, spec.in_dim, |i, j| v[(j, i)]);
            let base = AdapterSpec::tensor_base(block, module);
            tensors.push((
                format!("{base}.lora_A.weight"),
                spec.dtype,
                vec![spec.rank, spec.in_dim],
                spec.dtype.encode(lora_a.as_slice()),
            ));
            tensors.push((
                format!("{base}.lora_B.weight"),
                spec.dtype,
                vec![spec.out_dim, spec.rank],
                spec.dtype.encode(lora_b.as_slice()),
            ));
            layer += 1;
        }
    }
    let metadata = BTreeMap::from([("format".to_string(), "pt".to_string())]);
    let container = SafeTensors::from_tensors(tensors, metadata)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    let adapter_path = dir.join(ADAPTER_FILE_NAME);
    container.write(&adapter_path)?;

    let config = serde_json::json!({
        "r": spec.rank,
        "lora_alpha": spec.alpha,
        "target_modules": spec.modules,
        "peft_type": "LORA",
        "bias": "none",
    });
    let config_path = dir.join(CONFIG_FILE_NAME);
    std::fs::write(&config_path, serde_json::to_string_pretty(&config)?)?;
    Ok(SyntheticAdapter {
        _dir: None,
        dir: dir.to_path_buf(),
        adapter_path,
        config_path,
        spec: spec.clone(),
    })
}
