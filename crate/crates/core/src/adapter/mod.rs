//! LoRA adapter checkpoints: container I/O, config parsing, and pairing of
//! stored factor tensors into per-layer updates `ΔW = A·B`.
//!
//! Exporters store `lora_A` as (r × in) and `lora_B` as (out × r). Here `A`
//! is the (out × r) factor and `B` the (r × in) factor, so `A·B` has the
//! module's (out × in) shape.

mod config;
mod safetensors;

pub use config::AdapterConfig;
pub use safetensors::{bf16_to_f32, Dtype, SafeTensors, SafetensorsError, TensorRecord};

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::linalg::{matmul, Matrix};
use crate::scalar::Scalar;

pub const CONFIG_FILE_NAME: &str = "adapter_config.json";

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Container {
        path: PathBuf,
        #[source]
        source: SafetensorsError,
    },
    #[error("adapter config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] SafetensorsError),
    #[error("unknown layer: {0}")]
    UnknownLayer(LayerId),
}

/// Which projection inside a transformer block a layer adapts.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Projection {
    Q,
    K,
    V,
    O,
    /// Any other module, by its path relative to the block.
    Other(String),
}

impl Projection {
    pub fn from_module_path(path: &str) -> Self {
        let last = path.rsplit('.').next().unwrap_or(path);
        match last {
            "q_proj" | "q" => Self::Q,
            "k_proj" | "k" => Self::K,
            "v_proj" | "v" => Self::V,
            "o_proj" | "o" => Self::O,
            _ => Self::Other(path.to_string()),
        }
    }

    pub fn label(&self) -> &str {
        match self {
            Self::Q => "q",
            Self::K => "k",
            Self::V => "v",
            Self::O => "o",
            Self::Other(path) => path,
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Self::Q => 0,
            Self::K => 1,
            Self::V => 2,
            Self::O => 3,
            Self::Other(_) => 4,
        }
    }
}

impl Ord for Projection {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank()
            .cmp(&other.rank())
            .then_with(|| match (self, other) {
                (Self::Other(a), Self::Other(b)) => a.cmp(b),
                _ => Ordering::Equal,
            })
    }
}

impl PartialOrd for Projection {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A layer's identity: transformer block index and projection. Ordered by
/// block, then Q < K < V < O < other modules.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerId {
    pub block: usize,
    pub projection: Projection,
}

impl LayerId {
    pub fn new(block: usize, projection: Projection) -> Self {
        Self { block, projection }
    }
}

/// Renders as `"{block}.{label}"`, e.g. `"3.q"` or `"3.mlp.up_proj"`.
impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.block, self.projection.label())
    }
}

impl FromStr for LayerId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (block, label) = s
            .split_once('.')
            .ok_or_else(|| format!("malformed layer id `{s}`"))?;
        let block = block
            .parse()
            .map_err(|_| format!("malformed block index in `{s}`"))?;
        if label.is_empty() {
            return Err(format!("missing projection in `{s}`"));
        }
        Ok(Self::new(block, Projection::from_module_path(label)))
    }
}

impl Serialize for LayerId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which modules to analyze.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModuleFilter {
    All,
    /// Module names matched against the last path segment, with or without
    /// a `_proj` suffix, or against the whole path inside the block.
    Named(Vec<String>),
}

impl ModuleFilter {
    pub fn attention() -> Self {
        Self::Named(["q", "k", "v", "o"].map(String::from).to_vec())
    }

    /// Parses a comma-separated list; `all` or `*` selects everything.
    pub fn parse(list: &str) -> Self {
        let names: Vec<String> = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        if names.iter().any(|n| n == "all" || n == "*") {
            Self::All
        } else {
            Self::Named(names)
        }
    }

    pub fn matches(&self, module_path: &str) -> bool {
        match self {
            Self::All => true,
            Self::Named(names) => {
                let last = module_path.rsplit('.').next().unwrap_or(module_path);
                names.iter().any(|n| {
                    n == module_path || n == last || last.strip_suffix("_proj") == Some(n.as_str())
                })
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Self::All => "all".into(),
            Self::Named(names) => names.join(","),
        }
    }
}

impl Default for ModuleFilter {
    fn default() -> Self {
        Self::attention()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    pub modules: ModuleFilter,
    /// Multiply `A·B` by the config's scaling when materializing `ΔW`.
    pub apply_scaling: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            modules: ModuleFilter::default(),
            apply_scaling: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer<T = f64> {
    pub id: LayerId,
    /// Full module path, e.g. `base_model.model.layers.0.self_attn.q_proj`.
    pub module: String,
    /// Stored name of the (out × r) factor.
    pub a_tensor: String,
    /// Stored name of the (r × in) factor.
    pub b_tensor: String,
    pub dtype: Dtype,
    pub a: Matrix<T>,
    pub b: Matrix<T>,
}

impl<T: Scalar> LoraLayer<T> {
    /// `(out, in)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.a.rows(), self.b.cols())
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }
}

/// A layer whose tensors were found but could not be used.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerFault {
    pub id: LayerId,
    pub module: String,
    pub tensors: Vec<String>,
    pub message: String,
}

/// A parsed adapter: the raw container plus the decoded layers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBundle<T = f64> {
    container: SafeTensors,
    layers: Vec<LoraLayer<T>>,
    faults: Vec<LayerFault>,
    rank: usize,
    scaling: f64,
    apply_scaling: bool,
    config: Option<AdapterConfig>,
    unrecognized: Vec<String>,
    filtered: Vec<String>,
    diagnostics: Vec<String>,
}

struct Pending {
    a: Option<String>,
    b: Option<String>,
    rel_path: String,
    block: usize,
}

fn lora_name_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| {
        Regex::new(r"^(?P<module>(?:.*\.)?layers\.(?P<block>\d+)\.(?P<rel>.+?))\.lora_(?P<side>[AB])(?:\.[A-Za-z0-9_]+)?\.weight$")
            .expect("valid pattern")
    })
}

impl<T: Scalar> AdapterBundle<T> {
    /// Reads a checkpoint and its config. Without an explicit `config_path`,
    /// `adapter_config.json` next to the checkpoint is used when present.
    pub fn load(
        adapter: &Path,
        config_path: Option<&Path>,
        options: &LoadOptions,
    ) -> Result<Self, AdapterError> {
        let container = SafeTensors::read(adapter)?;
        let sibling = adapter.parent().map(|p| p.join(CONFIG_FILE_NAME));
        let path = match config_path {
            Some(p) => Some(p.to_path_buf()),
            None => sibling.filter(|p| p.is_file()),
        };
        let config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(&p).map_err(|source| AdapterError::Io {
                    path: p.clone(),
                    source,
                })?;
                Some(AdapterConfig::parse(&text)?)
            }
            None => None,
        };
        Self::from_container(container, config, options)
    }

    /// Pairs the container's LoRA tensors into layers.
    pub fn from_container(
        container: SafeTensors,
        config: Option<AdapterConfig>,
        options: &LoadOptions,
    ) -> Result<Self, AdapterError> {
        let pattern = lora_name_pattern();
        let mut unrecognized = Vec::new();
        let mut filtered = Vec::new();
        let mut diagnostics = Vec::new();
        let mut pending: BTreeMap<String, Pending> = BTreeMap::new();

        for record in container.records() {
            let Some(caps) = pattern.captures(&record.name) else {
                unrecognized.push(record.name.clone());
                continue;
            };
            let module = caps["module"].to_string();
            let rel_path = caps["rel"].to_string();
            if !options.modules.matches(&rel_path) {
                filtered.push(record.name.clone());
                continue;
            }
            let Ok(block) = caps["block"].parse() else {
                unrecognized.push(record.name.clone());
                continue;
            };
            let entry = pending.entry(module).or_insert_with(|| Pending {
                a: None,
                b: None,
                rel_path,
                block,
            });
            let slot = if &caps["side"] == "A" {
                &mut entry.a
            } else {
                &mut entry.b
            };
            if let Some(existing) = slot {
                diagnostics.push(format!(
                    "tensor `{}` duplicates `{existing}`; ignored",
                    record.name
                ));
                unrecognized.push(record.name.clone());
            } else {
                *slot = Some(record.name.clone());
            }
        }

        let declared_rank = config.as_ref().map(|c| c.rank);
        let mut rank = declared_rank;
        let mut layers: Vec<LoraLayer<T>> = Vec::new();
        let mut faults = Vec::new();
        let mut seen: BTreeMap<LayerId, String> = BTreeMap::new();

        for (module, p) in pending {
            let (Some(lora_a), Some(lora_b)) = (p.a.clone(), p.b.clone()) else {
                let (present, missing) = match (&p.a, &p.b) {
                    (Some(a), None) => (a, "lora_B"),
                    (None, Some(b)) => (b, "lora_A"),
                    _ => unreachable!("module entries hold at least one tensor"),
                };
                diagnostics.push(format!(
                    "tensor `{present}` has no matching {missing}; excluded"
                ));
                unrecognized.push(present.clone());
                continue;
            };
            let id = LayerId::new(p.block, Projection::from_module_path(&p.rel_path));
            let tensors = vec![lora_a.clone(), lora_b.clone()];
            if let Some(other) = seen.get(&id) {
                faults.push(LayerFault {
                    id: id.clone(),
                    module: module.clone(),
                    message: format!("layer id {id} already taken by module `{other}`"),
                    tensors,
                });
                continue;
            }
            seen.insert(id.clone(), module.clone());
            match orient::<T>(&container, &lora_a, &lora_b, rank) {
                Ok((a, b, dtype)) => {
                    rank.get_or_insert(a.cols());
                    layers.push(LoraLayer {
                        id,
                        module,
                        a_tensor: lora_b,
                        b_tensor: lora_a,
                        dtype,
                        a,
                        b,
                    });
                }
                Err(message) => faults.push(LayerFault {
                    id,
                    module,
                    tensors,
                    message,
                }),
            }
        }
        layers.sort_by(|x, y| x.id.cmp(&y.id));
        faults.sort_by(|x, y| x.id.cmp(&y.id));

        let rank = rank.unwrap_or(0);
        let scaling = match &config {
            Some(c) => c.scaling(),
            None => {
                diagnostics.push(format!(
                    "no adapter config; rank inferred as {rank} from the first layer and lora_alpha assumed equal to it"
                ));
                1.0
            }
        };
        Ok(Self {
            container,
            layers,
            faults,
            rank,
            scaling,
            apply_scaling: options.apply_scaling,
            config,
            unrecognized,
            filtered,
            diagnostics,
        })
    }

    pub fn layers(&self) -> &[LoraLayer<T>] {
        &self.layers
    }

    pub fn layer(&self, id: &LayerId) -> Option<&LoraLayer<T>> {
        self.layers
            .binary_search_by(|l| l.id.cmp(id))
            .ok()
            .map(|i| &self.layers[i])
    }

    /// Layers with unusable tensors (shape mismatches, id collisions).
    pub fn faults(&self) -> &[LayerFault] {
        &self.faults
    }

    /// Declared rank, or the inner dimension of the first layer when no
    /// config was available.
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// The config's `α/r` multiplier (1 without a config).
    pub fn scaling(&self) -> f64 {
        self.scaling
    }

    pub fn applies_scaling(&self) -> bool {
        self.apply_scaling
    }

    pub fn config(&self) -> Option<&AdapterConfig> {
        self.config.as_ref()
    }

    pub fn container(&self) -> &SafeTensors {
        &self.container
    }

    /// Tensors that do not follow the LoRA naming scheme, or could not be
    /// paired.
    pub fn unrecognized(&self) -> &[String] {
        &self.unrecognized
    }

    /// LoRA tensors of modules excluded by the module filter.
    pub fn filtered(&self) -> &[String] {
        &self.filtered
    }

    pub fn diagnostics(&self) -> &[String] {
        &self.diagnostics
    }

    /// `ΔW = s·A·B`, with `s` the scaling when enabled and 1 otherwise.
    pub fn delta_w(&self, layer: &LoraLayer<T>) -> Matrix<T> {
        let product = matmul(&layer.a, &layer.b).expect("factors share the inner dimension");
        if self.apply_scaling && self.scaling != 1.0 {
            product.scaled(T::lit(self.scaling))
        } else {
            product
        }
    }

    /// Zeroes both factors of a layer, in memory and in the container.
    pub fn zero_layer(&mut self, id: &LayerId) -> Result<(), AdapterError> {
        let i = self
            .layers
            .binary_search_by(|l| l.id.cmp(id))
            .map_err(|_| AdapterError::UnknownLayer(id.clone()))?;
        let layer = &mut self.layers[i];
        self.container.zero_tensor(&layer.a_tensor)?;
        self.container.zero_tensor(&layer.b_tensor)?;
        layer.a = Matrix::zeros(layer.a.rows(), layer.a.cols());
        layer.b = Matrix::zeros(layer.b.rows(), layer.b.cols());
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), AdapterError> {
        self.container
            .write(path)
            .map_err(|source| AdapterError::Io {
                path: path.to_path_buf(),
                source,
            })
    }
}

/// Decodes a `lora_A`/`lora_B` pair into `(A: out×r, B: r×in)`. The usual
/// layout is `lora_A` (r × in) and `lora_B` (out × r); the transposed layout
/// `lora_A` (in × r), `lora_B` (r × out) is accepted when it is the only one
/// consistent with the shapes and `rank`.
fn orient<T: Scalar>(
    container: &SafeTensors,
    lora_a: &str,
    lora_b: &str,
    rank: Option<usize>,
) -> Result<(Matrix<T>, Matrix<T>, Dtype), String> {
    let ra = container
        .get(lora_a)
        .expect("paired names come from the container");
    let rb = container
        .get(lora_b)
        .expect("paired names come from the container");
    let (&[a0, a1], &[b0, b1]) = (ra.shape.as_slice(), rb.shape.as_slice()) else {
        return Err(format!(
            "factors must be 2-D, got {:?} and {:?}",
            ra.shape, rb.shape
        ));
    };
    if ra.dtype != rb.dtype {
        return Err(format!(
            "factor dtypes differ ({} vs {})",
            ra.dtype, rb.dtype
        ));
    }
    let fits = |inner: usize| rank.is_none_or(|r| r == inner);
    let standard = b1 == a0;
    let transposed = a1 == b0;
    let use_transposed = match (standard, transposed) {
        (true, true) => !fits(a0) && fits(a1),
        (true, false) => false,
        (false, true) => true,
        (false, false) => {
            return Err(format!(
                "inner dimensions do not match: lora_A {:?}, lora_B {:?}",
                ra.shape, rb.shape
            ))
        }
    };
    let inner = if use_transposed { a1 } else { a0 };
    if let Some(r) = rank.filter(|&r| r != inner) {
        return Err(format!(
            "inner dimension {inner} differs from the adapter rank {r}"
        ));
    }
    let stored_a = Matrix::from_vec(a0, a1, ra.dtype.decode(container.payload(ra)))
        .map_err(|e| e.to_string())?;
    let stored_b = Matrix::from_vec(b0, b1, rb.dtype.decode(container.payload(rb)))
        .map_err(|e| e.to_string())?;
    if use_transposed {
        Ok((stored_b.transpose(), stored_a.transpose(), ra.dtype))
    } else {
        Ok((stored_b, stored_a, ra.dtype))
    }
}
