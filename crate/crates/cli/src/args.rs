//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Grid size used when `--subsample` is given without a value.
pub const DEFAULT_SUBSAMPLE: usize = 1 << 16;

#[derive(Debug, Parser)]
#[command(
    name = "lorasharp",
    version,
    about = "Spectral sharpness scoring and pruning for LoRA adapters"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List layers, shapes, dtypes and average row/column norms.
    Inspect(InspectArgs),
    /// Score every layer and rank by spectral sharpness.
    Score(ScoreArgs),
    /// Score, then zero the top-τ sharpest layers into a new checkpoint.
    Prune(PruneArgs),
}

#[derive(Debug, Clone, Args)]
pub struct AdapterArgs {
    /// Adapter checkpoint (`.safetensors`), or a directory holding
    /// `adapter_model.safetensors`.
    #[arg(long, value_name = "PATH")]
    pub adapter: PathBuf,
    /// Adapter config JSON; defaults to `adapter_config.json` next to the
    /// checkpoint when present.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Comma-separated modules to analyze (`q,k,v,o`), or `all`.
    #[arg(long, value_name = "LIST")]
    pub modules: Option<String>,
    /// Use `A·B` without the `α/r` scaling.
    #[arg(long)]
    pub no_scaling: bool,
}

#[derive(Debug, Clone, Args)]
pub struct AnalysisArgs {
    /// Stabilizer added to every norm and to the SSI denominator.
    #[arg(long, value_name = "EPS")]
    pub epsilon: Option<f64>,
    /// Rank-1 terms extracted per layer (M); defaults to the adapter rank.
    #[arg(long, value_name = "M")]
    pub components: Option<usize>,
    /// Singular values in the SSI denominator; defaults to the adapter rank.
    #[arg(long, value_name = "H")]
    pub h: Option<usize>,
    /// Run the L1 fits on a stratified grid of at most N entries per layer
    /// (65536 when N is omitted).
    #[arg(long, value_name = "N", num_args = 0..=1, default_missing_value = "65536")]
    pub subsample: Option<usize>,
    /// Worker threads for scoring layers; all cores by default. Does not
    /// affect the output.
    #[arg(long, value_name = "N")]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub adapter: AdapterArgs,
    /// Write the summary as JSON.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub adapter: AdapterArgs,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
    /// Write the sharpness report as JSON.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
    /// Write per-layer scores as CSV.
    #[arg(long, value_name = "PATH")]
    pub csv: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct PruneArgs {
    #[command(flatten)]
    pub adapter: AdapterArgs,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
    /// Number of sharpest layers to zero.
    #[arg(long, value_name = "TAU")]
    pub tau: Option<usize>,
    /// Pruned checkpoint to write.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Pruning plan JSON; defaults to `pruning_plan.json` next to `--out`.
    #[arg(long, value_name = "PATH")]
    pub plan: Option<PathBuf>,
    /// Also write the sharpness report as JSON.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long)]
    pub force: bool,
}
