//! JSON and CSV artifacts. Field order is declaration order, so output is
//! byte-stable for identical inputs.

use std::collections::BTreeMap;

use lorasharp_core::adapter::{AdapterBundle, LoraLayer};
use lorasharp_core::ssi::{LayerScore, SharpnessReport};
use lorasharp_core::LayerId;
use serde::Serialize;

/// Version of the report and inspect-summary layouts; see `schemas/`.
pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Where a setting's value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Flag,
    AdapterConfig,
    /// Derived from tensor shapes because no adapter config was found.
    Inferred,
    Default,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Setting<T> {
    pub value: T,
    pub source: Source,
}

impl<T> Setting<T> {
    pub fn new(value: T, source: Source) -> Self {
        Self { value, source }
    }

    /// `flag` when given, otherwise `fallback`.
    pub fn pick(flag: Option<T>, fallback: Setting<T>) -> Self {
        match flag {
            Some(value) => Self::new(value, Source::Flag),
            None => fallback,
        }
    }
}

/// Every effective setting of a run. The worker count is deliberately absent:
/// it cannot change the output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigEcho {
    pub adapter: Setting<String>,
    pub adapter_config: Setting<Option<String>>,
    pub modules: Setting<String>,
    pub apply_scaling: Setting<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<Setting<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub components: Option<Setting<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h: Option<Setting<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subsample: Option<Setting<Option<usize>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<Setting<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdapterSummary {
    pub rank: usize,
    pub alpha: Option<f64>,
    pub use_rslora: bool,
    pub scaling: f64,
    pub scaling_applied: bool,
    pub tensors: usize,
    pub layers: usize,
    pub target_modules: Vec<String>,
    pub metadata: BTreeMap<String, String>,
}

impl AdapterSummary {
    pub fn of(bundle: &AdapterBundle) -> Self {
        let config = bundle.config();
        Self {
            rank: bundle.rank(),
            alpha: config.map(|c| c.alpha),
            use_rslora: config.is_some_and(|c| c.use_rslora),
            scaling: bundle.scaling(),
            scaling_applied: bundle.applies_scaling(),
            tensors: bundle.container().records().len(),
            layers: bundle.layers().len(),
            target_modules: config.map(|c| c.target_modules.clone()).unwrap_or_default(),
            metadata: bundle.container().metadata().clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    /// A layer that could not be paired or scored.
    LayerFailure,
    /// A tensor that does not follow LoRA naming.
    UnrecognizedTensor,
    /// A LoRA tensor left out by the module filter.
    FilteredTensor,
    /// A note about how the adapter was interpreted.
    Adapter,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer_id: Option<LayerId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tensor: Option<String>,
    pub message: String,
}

/// Loader diagnostics of a bundle, in a fixed order.
pub fn bundle_diagnostics(bundle: &AdapterBundle) -> Vec<Diagnostic> {
    let mut out: Vec<Diagnostic> = bundle
        .diagnostics()
        .iter()
        .map(|m| Diagnostic {
            kind: DiagnosticKind::Adapter,
            layer_id: None,
            tensor: None,
            message: m.clone(),
        })
        .collect();
    out.extend(bundle.unrecognized().iter().map(|t| Diagnostic {
        kind: DiagnosticKind::UnrecognizedTensor,
        layer_id: None,
        tensor: Some(t.clone()),
        message: "not a LoRA factor; left unchanged".into(),
    }));
    out.extend(bundle.filtered().iter().map(|t| Diagnostic {
        kind: DiagnosticKind::FilteredTensor,
        layer_id: None,
        tensor: Some(t.clone()),
        message: "module excluded by filter; left unchanged".into(),
    }));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRow {
    pub layer_id: LayerId,
    pub block: usize,
    pub projection: String,
    pub module: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub rank_position: usize,
    pub ssi: f64,
    pub sigma_top: f64,
    pub sigma_sum: f64,
    pub h_used: usize,
    pub r_bar: f64,
    pub c_bar: f64,
    pub zero_update: bool,
    pub components_extracted: usize,
    pub singular_values: Vec<f64>,
    pub rescaled_values: Vec<f64>,
}

impl LayerRow {
    fn new(score: &LayerScore, layer: &LoraLayer, rank_position: usize) -> Self {
        let (out_dim, in_dim) = layer.shape();
        Self {
            layer_id: score.layer_id.clone(),
            block: score.layer_id.block,
            projection: score.layer_id.projection.label().to_string(),
            module: score.module.clone(),
            shape: [out_dim, in_dim],
            dtype: layer.dtype.as_str().to_string(),
            rank_position,
            ssi: score.ssi,
            sigma_top: score.sigma_top,
            sigma_sum: score.sigma_sum,
            h_used: score.h_used,
            r_bar: score.r_bar,
            c_bar: score.c_bar,
            zero_update: score.zero_update,
            components_extracted: score.components_extracted,
            singular_values: score.singular_values.clone(),
            rescaled_values: score.rescaled_values.clone(),
        }
    }
}

/// Output of `score` and `prune`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    pub schema_version: u32,
    pub tool_version: &'static str,
    pub command: &'static str,
    pub config: ConfigEcho,
    pub adapter: AdapterSummary,
    /// Scored layers in block/projection order.
    pub layers: Vec<LayerRow>,
    /// Scored layers, sharpest first.
    pub ranking: Vec<LayerId>,
    pub diagnostics: Vec<Diagnostic>,
}

impl ScoreReport {
    pub fn new(
        command: &'static str,
        config: ConfigEcho,
        bundle: &AdapterBundle,
        report: &SharpnessReport,
    ) -> Self {
        let mut layers: Vec<LayerRow> = report
            .scores
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let layer = bundle
                    .layer(&s.layer_id)
                    .expect("scores come from the bundle");
                LayerRow::new(s, layer, i + 1)
            })
            .collect();
        layers.sort_by(|a, b| a.layer_id.cmp(&b.layer_id));
        let mut diagnostics = bundle_diagnostics(bundle);
        diagnostics.extend(report.failures.iter().map(|f| Diagnostic {
            kind: DiagnosticKind::LayerFailure,
            layer_id: Some(f.layer_id.clone()),
            tensor: None,
            message: format!("{}: {}", f.module, f.message),
        }));
        Self {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION,
            command,
            config,
            adapter: AdapterSummary::of(bundle),
            layers,
            ranking: report.ranking(),
            diagnostics,
        }
    }

    /// Flat per-layer view, sharpest first.
    pub fn to_csv(&self) -> Result<Vec<u8>, csv::Error> {
        let mut rows: Vec<&LayerRow> = self.layers.iter().collect();
        rows.sort_by_key(|r| r.rank_position);
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "rank_position",
            "layer_id",
            "block",
            "projection",
            "module",
            "ssi",
            "sigma_top",
            "sigma_sum",
            "h_used",
            "r_bar",
            "c_bar",
            "zero_update",
        ])?;
        for r in rows {
            w.write_record([
                r.rank_position.to_string(),
                r.layer_id.to_string(),
                r.block.to_string(),
                r.projection.clone(),
                r.module.clone(),
                r.ssi.to_string(),
                r.sigma_top.to_string(),
                r.sigma_sum.to_string(),
                r.h_used.to_string(),
                r.r_bar.to_string(),
                r.c_bar.to_string(),
                r.zero_update.to_string(),
            ])?;
        }
        w.into_inner().map_err(|e| e.into_error().into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InspectRow {
    pub layer_id: LayerId,
    pub block: usize,
    pub projection: String,
    pub module: String,
    pub shape: [usize; 2],
    pub rank: usize,
    pub dtype: String,
    pub a_tensor: String,
    pub b_tensor: String,
    pub r_bar: f64,
    pub c_bar: f64,
}

impl InspectRow {
    pub fn new(layer: &LoraLayer, r_bar: f64, c_bar: f64) -> Self {
        let (out_dim, in_dim) = layer.shape();
        Self {
            layer_id: layer.id.clone(),
            block: layer.id.block,
            projection: layer.id.projection.label().to_string(),
            module: layer.module.clone(),
            shape: [out_dim, in_dim],
            rank: layer.rank(),
            dtype: layer.dtype.as_str().to_string(),
            a_tensor: layer.a_tensor.clone(),
            b_tensor: layer.b_tensor.clone(),
            r_bar,
            c_bar,
        }
    }
}

/// Output of `inspect`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InspectSummary {
    pub schema_version: u32,
    pub tool_version: &'static str,
    pub command: &'static str,
    pub config: ConfigEcho,
    pub adapter: AdapterSummary,
    pub layers: Vec<InspectRow>,
    pub diagnostics: Vec<Diagnostic>,
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("report types serialize");
    out.push(b'\n');
    out
}
