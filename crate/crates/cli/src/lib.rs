//! `lorasharp` command implementations.
//!
//! Exit codes follow `sysexits.h`: 64 usage, 65 malformed input, 66 missing
//! input, 70 internal failure, 73 output cannot be created.

pub mod args;
pub mod report;

use std::io::Write;
use std::path::{Path, PathBuf};

use lorasharp_core::adapter::{
    AdapterBundle, AdapterError, LoadOptions, ModuleFilter, CONFIG_FILE_NAME,
};
use lorasharp_core::mas_svd::{average_norms, MasSvdConfig, DEFAULT_EPSILON};
use lorasharp_core::ssi::{
    apply_pruning, build_pruning_plan, score_adapter, SharpnessReport, SsiError, DEFAULT_TAU,
};
use thiserror::Error;

use crate::args::{AdapterArgs, AnalysisArgs, Cli, Command, InspectArgs, PruneArgs, ScoreArgs};
use crate::report::{
    bundle_diagnostics, to_json, AdapterSummary, ConfigEcho, Diagnostic, DiagnosticKind,
    InspectRow, InspectSummary, ScoreReport, Setting, Source, SCHEMA_VERSION, TOOL_VERSION,
};

/// File name looked up when `--adapter` is a directory.
pub const ADAPTER_FILE_NAME: &str = "adapter_model.safetensors";
/// Plan file name used when `--plan` is not given.
pub const PLAN_FILE_NAME: &str = "pruning_plan.json";

pub const EXIT_USAGE: u8 = 64;
pub const EXIT_DATA: u8 = 65;
pub const EXIT_NO_INPUT: u8 = 66;
pub const EXIT_SOFTWARE: u8 = 70;
pub const EXIT_CANT_CREATE: u8 = 73;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    NoInput(String),
    #[error("{0}")]
    Software(String),
    #[error("{0}")]
    CantCreate(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Data(_) => EXIT_DATA,
            Self::NoInput(_) => EXIT_NO_INPUT,
            Self::Software(_) => EXIT_SOFTWARE,
            Self::CantCreate(_) => EXIT_CANT_CREATE,
        }
    }
}

impl From<AdapterError> for CliError {
    fn from(e: AdapterError) -> Self {
        match e {
            AdapterError::Io { .. } => Self::NoInput(e.to_string()),
            AdapterError::Container { .. } | AdapterError::Config(_) | AdapterError::Tensor(_) => {
                Self::Data(e.to_string())
            }
            AdapterError::UnknownLayer(_) => Self::Software(e.to_string()),
        }
    }
}

impl From<SsiError> for CliError {
    fn from(e: SsiError) -> Self {
        match e {
            SsiError::InvalidH | SsiError::InvalidEpsilon(_) => Self::Usage(e.to_string()),
            SsiError::NoLayers => Self::Data(e.to_string()),
            SsiError::Adapter(inner) => inner.into(),
            SsiError::Pool(_) | SsiError::UnknownLayers(_) => Self::Software(e.to_string()),
        }
    }
}

/// Runs one parsed command, writing human-readable output to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Inspect(args) => inspect(&args, stdout),
        Command::Score(args) => score(&args, stdout),
        Command::Prune(args) => prune(&args, stdout),
    }
}

/// An adapter loaded together with how its settings were resolved.
struct Loaded {
    bundle: AdapterBundle,
    echo: ConfigEcho,
}

fn load(args: &AdapterArgs) -> Result<Loaded, CliError> {
    let adapter = if args.adapter.is_dir() {
        args.adapter.join(ADAPTER_FILE_NAME)
    } else {
        args.adapter.clone()
    };
    if !adapter.is_file() {
        return Err(CliError::NoInput(format!(
            "{}: no such adapter file",
            adapter.display()
        )));
    }
    let config_path = match &args.config {
        Some(p) if !p.is_file() => {
            return Err(CliError::NoInput(format!(
                "{}: no such config file",
                p.display()
            )));
        }
        Some(p) => Setting::new(Some(p.clone()), Source::Flag),
        None => {
            let sibling = adapter
                .parent()
                .map(|d| d.join(CONFIG_FILE_NAME))
                .filter(|p| p.is_file());
            Setting::new(sibling, Source::Default)
        }
    };
    let modules = match &args.modules {
        Some(list) => {
            let filter = ModuleFilter::parse(list);
            if filter == ModuleFilter::Named(Vec::new()) {
                return Err(CliError::Usage(
                    "--modules needs at least one module name".into(),
                ));
            }
            Setting::new(filter, Source::Flag)
        }
        None => Setting::new(ModuleFilter::default(), Source::Default),
    };
    let apply_scaling = if args.no_scaling {
        Setting::new(false, Source::Flag)
    } else {
        Setting::new(true, Source::Default)
    };
    let options = LoadOptions {
        modules: modules.value.clone(),
        apply_scaling: apply_scaling.value,
    };
    let bundle = AdapterBundle::load(&adapter, config_path.value.as_deref(), &options)?;
    let echo = ConfigEcho {
        adapter: Setting::new(path_string(&adapter), Source::Flag),
        adapter_config: Setting::new(
            config_path.value.as_deref().map(path_string),
            config_path.source,
        ),
        modules: Setting::new(modules.value.describe(), modules.source),
        apply_scaling,
        epsilon: None,
        components: None,
        h: None,
        subsample: None,
        tau: None,
    };
    Ok(Loaded { bundle, echo })
}

fn path_string(p: &Path) -> String {
    p.display().to_string()
}

/// Resolves the analysis settings against the loaded adapter and records
/// them in the echo.
fn analysis_config(
    args: &AnalysisArgs,
    loaded: &mut Loaded,
) -> Result<(MasSvdConfig, usize), CliError> {
    let rank_source = if loaded.bundle.config().is_some() {
        Source::AdapterConfig
    } else {
        Source::Inferred
    };
    let rank = loaded.bundle.rank();
    let epsilon = Setting::pick(args.epsilon, Setting::new(DEFAULT_EPSILON, Source::Default));
    let components = Setting::pick(args.components, Setting::new(rank, rank_source));
    let h = Setting::pick(args.h, Setting::new(rank, rank_source));
    let subsample = match args.subsample {
        Some(n) => Setting::new(Some(n), Source::Flag),
        None => Setting::new(None, Source::Default),
    };
    if !(epsilon.value.is_finite() && epsilon.value > 0.0) {
        return Err(CliError::Usage(format!(
            "--epsilon must be positive, got {}",
            epsilon.value
        )));
    }
    if components.value == 0 {
        return Err(CliError::Usage("--components must be at least 1".into()));
    }
    if h.value == 0 {
        return Err(CliError::Usage("--h must be at least 1".into()));
    }
    if subsample.value == Some(0) {
        return Err(CliError::Usage("--subsample must be positive".into()));
    }
    if args.workers == Some(0) {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    let cfg = MasSvdConfig {
        epsilon: epsilon.value,
        num_components: components.value,
        candidate_width: components.value,
        fit_subsample: subsample.value,
    };
    let h_value = h.value;
    loaded.echo.epsilon = Some(epsilon);
    loaded.echo.components = Some(components);
    loaded.echo.h = Some(h);
    loaded.echo.subsample = Some(subsample);
    Ok((cfg, h_value))
}

/// Fails before any work is done if an output would be overwritten without
/// `--force`, or if two outputs share a path.
fn check_outputs(paths: &[&Path], force: bool) -> Result<(), CliError> {
    for (i, p) in paths.iter().enumerate() {
        if paths[..i].contains(p) {
            return Err(CliError::Usage(format!(
                "{} is given for two outputs",
                p.display()
            )));
        }
    }
    for p in paths {
        if p.exists() && !force {
            return Err(CliError::CantCreate(format!(
                "{} already exists; pass --force to overwrite",
                p.display()
            )));
        }
    }
    Ok(())
}

/// Writes `bytes` to a temporary file beside `path` and renames it into
/// place, so `path` is either untouched or complete.
fn write_atomic(path: &Path, bytes: &[u8], force: bool) -> Result<(), CliError> {
    let fail = |e: std::io::Error| CliError::CantCreate(format!("{}: {e}", path.display()));
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(fail)?;
    tmp.write_all(bytes).map_err(fail)?;
    tmp.as_file().sync_all().map_err(fail)?;
    if force {
        tmp.persist(path).map_err(|e| fail(e.error))?;
    } else {
        tmp.persist_noclobber(path).map_err(|e| fail(e.error))?;
    }
    Ok(())
}

fn inspect(args: &InspectArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let outputs: Vec<&Path> = args.report.iter().map(PathBuf::as_path).collect();
    check_outputs(&outputs, args.force)?;
    let loaded = load(&args.adapter)?;
    let bundle = &loaded.bundle;
    let layers: Vec<InspectRow> = bundle
        .layers()
        .iter()
        .map(|l| {
            let (r_bar, c_bar) = average_norms(&bundle.delta_w(l));
            InspectRow::new(l, r_bar, c_bar)
        })
        .collect();
    let mut diagnostics = bundle_diagnostics(bundle);
    diagnostics.extend(bundle.faults().iter().map(|f| Diagnostic {
        kind: DiagnosticKind::LayerFailure,
        layer_id: Some(f.id.clone()),
        tensor: None,
        message: format!("{}: {}", f.module, f.message),
    }));
    let summary = InspectSummary {
        schema_version: SCHEMA_VERSION,
        tool_version: TOOL_VERSION,
        command: "inspect",
        config: loaded.echo.clone(),
        adapter: AdapterSummary::of(bundle),
        layers,
        diagnostics,
    };
    print_inspect(&summary, stdout).map_err(stdout_error)?;
    if let Some(path) = &args.report {
        write_atomic(path, &to_json(&summary), args.force)?;
    }
    Ok(())
}

fn score_loaded(loaded: &mut Loaded, analysis: &AnalysisArgs) -> Result<SharpnessReport, CliError> {
    let (cfg, h) = analysis_config(analysis, loaded)?;
    Ok(score_adapter(&loaded.bundle, &cfg, h, analysis.workers)?)
}

fn score(args: &ScoreArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let outputs: Vec<&Path> = args
        .report
        .iter()
        .chain(&args.csv)
        .map(PathBuf::as_path)
        .collect();
    check_outputs(&outputs, args.force)?;
    let mut loaded = load(&args.adapter)?;
    let sharpness = score_loaded(&mut loaded, &args.analysis)?;
    let report = ScoreReport::new("score", loaded.echo.clone(), &loaded.bundle, &sharpness);
    print_scores(&report, stdout).map_err(stdout_error)?;
    if let Some(path) = &args.report {
        write_atomic(path, &to_json(&report), args.force)?;
    }
    if let Some(path) = &args.csv {
        let bytes = report
            .to_csv()
            .map_err(|e| CliError::Software(format!("csv: {e}")))?;
        write_atomic(path, &bytes, args.force)?;
    }
    Ok(())
}

fn prune(args: &PruneArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let plan_path = args
        .plan
        .clone()
        .unwrap_or_else(|| match args.out.parent() {
            Some(d) => d.join(PLAN_FILE_NAME),
            None => PathBuf::from(PLAN_FILE_NAME),
        });
    let mut outputs = vec![args.out.as_path(), plan_path.as_path()];
    outputs.extend(args.report.as_deref());
    check_outputs(&outputs, args.force)?;

    let mut loaded = load(&args.adapter)?;
    let tau = Setting::pick(args.tau, Setting::new(DEFAULT_TAU, Source::Default));
    let sharpness = score_loaded(&mut loaded, &args.analysis)?;
    let plan = build_pruning_plan(&sharpness, tau.value);
    loaded.echo.tau = Some(tau);
    let pruned = apply_pruning(&loaded.bundle, &plan)?;

    write_atomic(&args.out, &pruned.container().to_bytes(), args.force)?;
    write_atomic(&plan_path, &to_json(&plan), args.force)?;
    let report = ScoreReport::new("prune", loaded.echo.clone(), &loaded.bundle, &sharpness);
    if let Some(path) = &args.report {
        write_atomic(path, &to_json(&report), args.force)?;
    }
    print_scores(&report, stdout).map_err(stdout_error)?;
    writeln!(
        stdout,
        "pruned {} of {} layers{}",
        plan.pruned_layers.len(),
        report.layers.len(),
        plan.cutoff_ssi
            .map(|c| format!(" (cutoff SSI {c:.6})"))
            .unwrap_or_default()
    )
    .map_err(stdout_error)?;
    for id in &plan.pruned_layers {
        writeln!(stdout, "  {id}").map_err(stdout_error)?;
    }
    writeln!(
        stdout,
        "wrote {} and {}",
        args.out.display(),
        plan_path.display()
    )
    .map_err(stdout_error)?;
    Ok(())
}

fn stdout_error(e: std::io::Error) -> CliError {
    CliError::Software(format!("stdout: {e}"))
}

fn print_inspect(s: &InspectSummary, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(
        out,
        "rank {}  scaling {}{}  layers {}  tensors {}",
        s.adapter.rank,
        s.adapter.scaling,
        if s.adapter.scaling_applied {
            ""
        } else {
            " (not applied)"
        },
        s.adapter.layers,
        s.adapter.tensors
    )?;
    writeln!(
        out,
        "{:<12} {:>12} {:>5} {:>5} {:>14} {:>14}",
        "layer", "shape", "rank", "dtype", "r_bar", "c_bar"
    )?;
    for l in &s.layers {
        writeln!(
            out,
            "{:<12} {:>12} {:>5} {:>5} {:>14.6e} {:>14.6e}",
            l.layer_id.to_string(),
            format!("{}x{}", l.shape[0], l.shape[1]),
            l.rank,
            l.dtype,
            l.r_bar,
            l.c_bar
        )?;
    }
    print_diagnostics(&s.diagnostics, out)
}

fn print_scores(r: &ScoreReport, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(
        out,
        "{:>4} {:<12} {:>10} {:>14} {:>14}",
        "#", "layer", "ssi", "sigma_top", "sigma_sum"
    )?;
    let mut rows: Vec<_> = r.layers.iter().collect();
    rows.sort_by_key(|l| l.rank_position);
    for l in rows {
        writeln!(
            out,
            "{:>4} {:<12} {:>10.6} {:>14.6e} {:>14.6e}",
            l.rank_position,
            l.layer_id.to_string(),
            l.ssi,
            l.sigma_top,
            l.sigma_sum
        )?;
    }
    print_diagnostics(&r.diagnostics, out)
}

fn print_diagnostics(diagnostics: &[Diagnostic], out: &mut dyn Write) -> std::io::Result<()> {
    for d in diagnostics {
        let subject = match (&d.layer_id, &d.tensor) {
            (Some(id), _) => format!("{id}: "),
            (None, Some(t)) => format!("{t}: "),
            (None, None) => String::new(),
        };
        writeln!(out, "note: {subject}{}", d.message)?;
    }
    Ok(())
}
