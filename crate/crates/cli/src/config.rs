//! Run configuration: a JSON file, then command-line overrides.

use std::path::{Path, PathBuf};

use clap::Args;
use mfgl_core::experiment::{AutoOr, ErrorMetric, PipelineConfig, SolverKind};
use mfgl_core::{MatrixFormat, NormalizationMode, SaddleMethod};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a command may need. Field names double as flag names.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct RunConfig {
    pub lf_path: Option<PathBuf>,
    pub hf_path: Option<PathBuf>,
    pub plan_path: Option<PathBuf>,
    /// One parameter identifier per low-fidelity row.
    pub ids_path: Option<PathBuf>,
    pub format: Option<MatrixFormat>,
    pub header: bool,
    pub output_dir: Option<PathBuf>,
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(mfgl_core::Error::from)?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    /// Format given explicitly, else inferred from `path`'s extension.
    pub fn format_for(&self, path: &Path) -> MatrixFormat {
        self.format.unwrap_or_else(|| match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => MatrixFormat::Bin,
            _ => MatrixFormat::Csv,
        })
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}

/// Parses a value by its JSON spelling, so flags accept exactly the names
/// used in config files.
pub fn serde_value<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Default, Args)]
pub struct IoArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Matrix file format: csv or bin (default: from the file extension).
    #[arg(long, value_parser = serde_value::<MatrixFormat>)]
    pub format: Option<MatrixFormat>,
    /// CSV inputs start with a header row.
    #[arg(long)]
    pub header: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct PipelineArgs {
    /// Number of high-fidelity evaluations.
    #[arg(long)]
    pub m: Option<usize>,
    /// none, per-component-standardize or per-instance-unit-norm.
    #[arg(long, value_parser = serde_value::<NormalizationMode>)]
    pub normalization: Option<NormalizationMode>,
    #[arg(long, allow_hyphen_values = true)]
    pub p: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub q: Option<f64>,
    #[arg(long)]
    pub knn_k: Option<usize>,
    /// dense, truncated or nystrom.
    #[arg(long, value_parser = serde_value::<SolverKind>)]
    pub solver: Option<SolverKind>,
    /// Truncation size or landmark count (default 4 M).
    #[arg(long)]
    pub k: Option<usize>,
    /// High-fidelity noise standard deviation, in data units.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub r: Option<f64>,
    /// `auto` or a value.
    #[arg(long)]
    pub omega: Option<AutoOr>,
    /// `auto` or a value.
    #[arg(long)]
    pub tau: Option<AutoOr>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// woodbury, symmetric-saddle or unsymmetric-saddle.
    #[arg(long, value_parser = serde_value::<SaddleMethod>)]
    pub saddle_method: Option<SaddleMethod>,
    /// Keep only this many landmark-block eigenvalues.
    #[arg(long)]
    pub rank_r: Option<usize>,
    /// field-rel-l2 or component-rel-abs.
    #[arg(long, value_parser = serde_value::<ErrorMetric>)]
    pub metric: Option<ErrorMetric>,
}

macro_rules! override_fields {
    ($dst:expr, $src:expr; $($f:ident),*) => {
        $( if let Some(v) = $src.$f { $dst.$f = v; } )*
    };
}

macro_rules! override_options {
    ($dst:expr, $src:expr; $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f; } )*
    };
}

impl PipelineArgs {
    pub fn apply(&self, cfg: &mut PipelineConfig) {
        let a = self.clone();
        override_fields!(cfg, a; m, normalization, p, q, knn_k, solver, beta, r, omega, tau, seed, metric);
        override_options!(cfg, a; k, sigma, embed_dim, saddle_method, rank_r);
    }
}

/// Loads `--config` if given and applies the flag overrides.
pub fn resolve(io: &IoArgs, pipeline: &PipelineArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &io.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if io.output_dir.is_some() {
        cfg.output_dir = io.output_dir.clone();
    }
    if io.format.is_some() {
        cfg.format = io.format;
    }
    cfg.header |= io.header;
    pipeline.apply(&mut cfg.pipeline);
    Ok(cfg)
}
