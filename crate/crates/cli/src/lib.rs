//! The `mfgl` command line.
//!
//! `plan` selects the points to evaluate at high fidelity and writes the
//! reordered low-fidelity file; the user runs their own high-fidelity model
//! on those points; `estimate` then produces multi-fidelity estimates for
//! every point. `bench`, `synth` and `oracle` drive synthetic problems.
//!
//! Exit codes: 0 success, 2 I/O error, 3 validation error, 4 numerical
//! failure. Failures print one JSON object on stderr.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use mfgl_core::data::gather_rows;
use mfgl_core::experiment::{
    self, generate, run_pipeline, GeneratorId, PipelineConfig, StageTiming, SyntheticSpec,
};
use mfgl_core::io::{read_matrix, write_matrix, write_vector_csv};
use mfgl_core::{AcquisitionPlan, ErrorClass, MatrixFormat};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::json;

use config::{resolve, serde_value, IoArgs, PipelineArgs, RunConfig};

/// Command failure, classified for the exit code.
#[derive(Debug)]
pub enum CliError {
    Core(mfgl_core::Error),
    Validation(String),
    /// The high-fidelity file does not have one row per planned point.
    RowCountMismatch { found: usize, expected: usize },
}

impl From<mfgl_core::Error> for CliError {
    fn from(e: mfgl_core::Error) -> Self {
        Self::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Validation(_) | Self::RowCountMismatch { .. } => 3,
            Self::Core(e) => match e.class() {
                ErrorClass::Io => 2,
                ErrorClass::Validation => 3,
                ErrorClass::Numerical => 4,
            },
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let (code, message) = match self {
            Self::Validation(m) => ("Validation", m.clone()),
            Self::RowCountMismatch { found, expected } => (
                "RowCountMismatch",
                format!("high-fidelity file has {found} rows, plan selects {expected}"),
            ),
            Self::Core(e) => (e.code(), e.to_string()),
        };
        let class = match self.exit_code() {
            2 => "io",
            3 => "validation",
            _ => "numerical",
        };
        json!({ "error": code, "class": class, "message": message, "exit_code": self.exit_code() })
    }
}

#[derive(Debug, Parser)]
#[command(name = "mfgl", version, about = "Graph-Laplacian multi-fidelity estimation")]
pub struct Cli {
    /// Worker threads (also MFGL_THREADS).
    #[arg(long, global = true, env = "MFGL_THREADS")]
    pub threads: Option<usize>,
    /// Log more (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Choose the points to evaluate at high fidelity.
    Plan(PlanArgs),
    /// Combine high-fidelity results with the low-fidelity set.
    Estimate(EstimateArgs),
    /// Run the full pipeline on a synthetic problem and score it.
    Bench(BenchArgs),
    /// Write a synthetic problem to disk.
    Synth(SynthArgs),
    /// Evaluate a synthetic problem's high-fidelity oracle at planned points.
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Low-fidelity matrix, one point per row.
    #[arg(long, alias = "lf")]
    pub lf_path: Option<PathBuf>,
    /// Text file with one parameter id per low-fidelity row.
    #[arg(long, alias = "ids")]
    pub ids_path: Option<PathBuf>,
    #[command(flatten)]
    pub io: IoArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Low-fidelity matrix in plan order (as written by `plan`).
    #[arg(long, alias = "lf")]
    pub lf_path: Option<PathBuf>,
    /// High-fidelity rows for the planned points, in plan order.
    #[arg(long, alias = "hf")]
    pub hf_path: Option<PathBuf>,
    #[arg(long, alias = "plan")]
    pub plan_path: Option<PathBuf>,
    #[command(flatten)]
    pub io: IoArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ProblemArgs {
    /// clustered-shift, smooth-manifold or beam-like1-d.
    #[arg(long, value_parser = serde_value::<GeneratorId>, default_value = "clustered-shift")]
    pub generator: GeneratorId,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 5)]
    pub d: usize,
    #[arg(long, default_value_t = 10)]
    pub clusters: usize,
    /// Bias magnitude relative to the data scale.
    #[arg(long, default_value_t = 0.3)]
    pub displacement: f64,
    /// High-fidelity noise relative to the bias magnitude.
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    #[arg(long = "problem-seed", default_value_t = 0)]
    pub problem_seed: u64,
}

impl ProblemArgs {
    fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            generator: self.generator,
            n: self.n,
            d: self.d,
            clusters: self.clusters,
            displacement: self.displacement,
            noise: self.noise,
            seed: self.problem_seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[command(flatten)]
    pub io: IoArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, value_parser = serde_value::<MatrixFormat>, default_value = "csv")]
    pub format: MatrixFormat,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// `problem.json` written by `synth`.
    #[arg(long)]
    pub problem: PathBuf,
    #[arg(long, alias = "plan")]
    pub plan_path: PathBuf,
    /// Output matrix path; the format follows the extension.
    #[arg(long)]
    pub output: PathBuf,
}

/// What `synth` records about a problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ProblemFile {
    pub spec: SyntheticSpec,
    pub hf_noise_sigma: f64,
}

/// Installs the global thread pool; later calls are no-ops.
pub fn init_threads(threads: Option<usize>) {
    if let Some(n) = threads.filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    init_threads(cli.threads);
    match cli.command {
        Command::Plan(a) => cmd_plan(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Oracle(a) => cmd_oracle(a),
    }
}

fn required(p: &Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    p.clone()
        .ok_or_else(|| CliError::Validation(format!("--{flag} is required")))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(mfgl_core::Error::from)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(mfgl_core::Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(mfgl_core::Error::from)?;
    Ok(())
}

fn read_ids(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path).map_err(mfgl_core::Error::from)?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn timings_json(t: &[StageTiming]) -> serde_json::Value {
    let total: f64 = t.iter().map(|s| s.seconds).sum();
    json!({ "stages": t, "total_seconds": total })
}

pub fn cmd_plan(a: PlanArgs) -> Result<(), CliError> {
    let mut cfg = resolve(&a.io, &a.pipeline)?;
    if a.lf_path.is_some() {
        cfg.lf_path = a.lf_path.clone();
    }
    if a.ids_path.is_some() {
        cfg.ids_path = a.ids_path.clone();
    }
    let lf_path = required(&cfg.lf_path, "lf-path")?;
    let format = cfg.format_for(&lf_path);
    let lf = read_matrix(&lf_path, format, cfg.header)?;
    let ids = cfg.ids_path.as_deref().map(read_ids).transpose()?;
    if let Some(ids) = &ids {
        if ids.len() != lf.nrows() {
            return Err(CliError::Validation(format!(
                "{} ids for {} rows",
                ids.len(),
                lf.nrows()
            )));
        }
    }
    let out = experiment::plan(&lf, &cfg.pipeline)?;
    let dir = cfg.output_dir();
    ensure_dir(&dir)?;
    fs::write(dir.join("plan.json"), out.plan.to_json()? + "\n").map_err(mfgl_core::Error::from)?;
    let permuted = gather_rows(&lf, &out.plan.permutation);
    write_matrix(&dir.join(format!("lf_permuted.{}", format.extension())), &permuted, format)?;
    if out.embedding.ncols() > 0 {
        write_matrix(&dir.join("embedding.csv"), &out.embedding, MatrixFormat::Csv)?;
    }
    write_json(&dir.join("plan_timings.json"), &timings_json(&out.timings))?;
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    for &i in &out.plan.selected_indices {
        let line = match &ids {
            Some(ids) => ids[i].clone(),
            None => i.to_string(),
        };
        writeln!(lock, "{line}").map_err(mfgl_core::Error::from)?;
    }
    info!("plan written to {}", dir.display());
    Ok(())
}

/// Takes M from the plan and, unless `--seed` was given, the plan's seed.
fn align_with_plan(cfg: &mut PipelineConfig, plan: &AcquisitionPlan, seed_flag: Option<u64>) -> Result<(), CliError> {
    if cfg.m != 0 && cfg.m != plan.m() {
        return Err(CliError::Validation(format!(
            "config M = {} but the plan selects {} points",
            cfg.m,
            plan.m()
        )));
    }
    cfg.m = plan.m();
    cfg.seed = seed_flag.unwrap_or(plan.seed);
    Ok(())
}

pub fn cmd_estimate(a: EstimateArgs) -> Result<(), CliError> {
    let mut cfg = resolve(&a.io, &a.pipeline)?;
    for (src, dst) in [
        (&a.lf_path, &mut cfg.lf_path),
        (&a.hf_path, &mut cfg.hf_path),
        (&a.plan_path, &mut cfg.plan_path),
    ] {
        if src.is_some() {
            *dst = src.clone();
        }
    }
    let lf_path = required(&cfg.lf_path, "lf-path")?;
    let hf_path = required(&cfg.hf_path, "hf-path")?;
    let plan_path = required(&cfg.plan_path, "plan-path")?;
    let plan_text = fs::read_to_string(&plan_path).map_err(mfgl_core::Error::from)?;
    let plan = AcquisitionPlan::from_json(&plan_text)?;
    align_with_plan(&mut cfg.pipeline, &plan, a.pipeline.seed)?;

    let format = cfg.format_for(&lf_path);
    let lf = read_matrix(&lf_path, format, cfg.header)?;
    let hf = read_matrix(&hf_path, cfg.format_for(&hf_path), cfg.header)?;
    if lf.nrows() != plan.n() {
        return Err(CliError::Validation(format!(
            "low-fidelity file has {} rows, plan covers {}",
            lf.nrows(),
            plan.n()
        )));
    }
    if hf.nrows() != plan.m() {
        return Err(CliError::RowCountMismatch {
            found: hf.nrows(),
            expected: plan.m(),
        });
    }
    let out = experiment::estimate(&lf, &hf, &cfg.pipeline)?;
    let dir = cfg.output_dir();
    ensure_dir(&dir)?;
    write_matrix(&dir.join(format!("mf_estimates.{}", format.extension())), &out.mf_estimates, format)?;
    write_vector_csv(&dir.join("stddevs.csv"), "stddev", out.stddevs.as_slice())?;
    write_json(
        &dir.join("hyperparameters.json"),
        &json!({
            "hyperparameters": out.hyperparameters,
            "solver": cfg.pipeline.solver,
            "k": cfg.pipeline.effective_k(lf.nrows()),
            "calibration_trace": out.calibration_trace,
        }),
    )?;
    write_json(&dir.join("timings.json"), &timings_json(&out.timings))?;
    info!("estimates written to {}", dir.display());
    Ok(())
}

/// Bench default: M = 1% of N, at least 1.
fn default_bench_m(n: usize) -> usize {
    (n / 100).max(1)
}

pub fn cmd_bench(a: BenchArgs) -> Result<(), CliError> {
    let mut cfg = resolve(&a.io, &a.pipeline)?;
    if a.pipeline.m.is_none() && a.io.config.is_none() {
        cfg.pipeline.m = default_bench_m(a.problem.n);
    }
    let problem = generate(&a.problem.spec())?;
    let run = run_pipeline(&problem, &cfg.pipeline)?;
    let dir = cfg.output_dir();
    ensure_dir(&dir)?;
    write_json(&dir.join("report.json"), &run.report)?;
    let n = problem.n();
    let mut table = DMatrix::zeros(n, 3);
    for i in 0..n {
        table[(i, 0)] = run.report.per_point_lf[i];
        table[(i, 1)] = run.report.per_point[i];
        table[(i, 2)] = run.stddevs[i];
    }
    let header: Vec<String> = ["lf_error", "mf_error", "stddev"].iter().map(|s| s.to_string()).collect();
    mfgl_core::io::write_csv(&dir.join("per_point.csv"), &table, Some(&header))?;
    if run.plan.embedding.ncols() > 0 {
        write_matrix(&dir.join("embedding.csv"), &run.plan.embedding, MatrixFormat::Csv)?;
    }
    write_json(&dir.join("hyperparameters.json"), &run.estimate.hyperparameters)?;
    write_json(&dir.join("timings.json"), &timings_json(&run.timings()))?;
    println!(
        "{}",
        json!({
            "mean_lf": run.report.mean_lf,
            "mean_mf": run.report.mean_mf,
            "reduction": run.report.reduction,
            "solver": cfg.pipeline.solver,
            "m": cfg.pipeline.m,
        })
    );
    Ok(())
}

pub fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    let spec = a.problem.spec();
    let problem = generate(&spec)?;
    let dir = a.output_dir.unwrap_or_else(|| PathBuf::from("."));
    ensure_dir(&dir)?;
    let ext = a.format.extension();
    write_matrix(&dir.join(format!("lf.{ext}")), &problem.lf_data, a.format)?;
    write_matrix(&dir.join(format!("truth.{ext}")), &problem.true_data, a.format)?;
    if let Some(labels) = &problem.cluster_labels {
        let v: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        write_vector_csv(&dir.join("labels.csv"), "label", &v)?;
    }
    write_json(
        &dir.join("problem.json"),
        &ProblemFile {
            spec,
            hf_noise_sigma: problem.hf_noise_sigma,
        },
    )?;
    println!("{}", json!({ "hf_noise_sigma": problem.hf_noise_sigma }));
    Ok(())
}

pub fn cmd_oracle(a: OracleArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&a.problem).map_err(mfgl_core::Error::from)?;
    let pf: ProblemFile = serde_json::from_str(&text).map_err(mfgl_core::Error::from)?;
    let plan_text = fs::read_to_string(&a.plan_path).map_err(mfgl_core::Error::from)?;
    let plan = AcquisitionPlan::from_json(&plan_text)?;
    let problem = generate(&pf.spec)?;
    if plan.n() != problem.n() {
        return Err(CliError::Validation(format!(
            "plan covers {} points, problem has {}",
            plan.n(),
            problem.n()
        )));
    }
    let hf = problem.hf_rows(&plan.selected_indices);
    let cfg = RunConfig::default();
    write_matrix(&a.output, &hf, cfg.format_for(&a.output))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        let io = CliError::from(mfgl_core::Error::Io(std::io::Error::other("x")));
        assert_eq!(io.exit_code(), 2);
        assert_eq!(CliError::Validation("x".into()).exit_code(), 3);
        assert_eq!(CliError::RowCountMismatch { found: 1, expected: 2 }.exit_code(), 3);
        assert_eq!(CliError::from(mfgl_core::Error::SingularSystem).exit_code(), 4);
        let j = CliError::from(mfgl_core::Error::SingularSystem).to_json();
        assert_eq!(j["error"], "SingularSystem");
        assert_eq!(j["class"], "numerical");
    }

    #[test]
    fn flags_parse_into_pipeline_overrides() {
        let cli = Cli::try_parse_from([
            "mfgl", "estimate", "--lf", "a.csv", "--hf", "b.csv", "--plan", "p.json", "--omega", "auto", "--tau", "0.5",
            "--solver", "nystrom", "--saddle-method", "unsymmetric-saddle", "--threads", "2",
        ])
        .unwrap();
        assert_eq!(cli.threads, Some(2));
        let Command::Estimate(a) = cli.command else { panic!("wrong subcommand") };
        let cfg = resolve(&a.io, &a.pipeline).unwrap();
        assert_eq!(cfg.pipeline.tau, experiment::AutoOr::Fixed(0.5));
        assert_eq!(cfg.pipeline.omega, experiment::AutoOr::Auto);
        assert_eq!(cfg.pipeline.saddle_method, Some(mfgl_core::SaddleMethod::UnsymmetricSaddle));
        assert!(Cli::try_parse_from(["mfgl", "plan", "--solver", "fast"]).is_err());
    }

    #[test]
    fn plan_alignment_takes_m_and_seed_from_the_plan() {
        let plan = AcquisitionPlan {
            selected_indices: vec![2, 0],
            permutation: vec![2, 0, 1],
            centroids: vec![vec![0.0], vec![1.0]],
            cluster_assignment: vec![1, 2, 0],
            embed_dim: 1,
            seed: 7,
        };
        let mut cfg = PipelineConfig::default();
        align_with_plan(&mut cfg, &plan, None).unwrap();
        assert_eq!((cfg.m, cfg.seed), (2, 7));
        align_with_plan(&mut cfg, &plan, Some(3)).unwrap();
        assert_eq!(cfg.seed, 3);
        cfg.m = 5;
        assert!(align_with_plan(&mut cfg, &plan, None).is_err());
    }
}
