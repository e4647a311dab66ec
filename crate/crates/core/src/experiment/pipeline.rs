//! End-to-end estimation split into the two phases of real use:
//! [`plan`] picks the points to evaluate at high fidelity, and [`estimate`]
//! turns those evaluations into multi-fidelity estimates for every point.
//! [`run_pipeline`] chains both around a synthetic problem and scores the
//! result against its truth.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use log::info;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::acquisition::{plan_acquisition, AcquisitionPlan};
use crate::data::{
    gather_rows, invert_permutation, normalize, Dataset, HyperParameters, NormalizationMode,
    NormalizationSpec,
};
use crate::error::{Error, Result};
use crate::experiment::metrics::{ErrorMetric, ErrorReport};
use crate::experiment::synthetic::SyntheticProblem;
use crate::graph::{build_graph, laplacian, GraphLaplacian, DEFAULT_KNN_K};
use crate::nystrom::{nystrom_general_p, select_landmarks, NystromOptions, SaddleMethod};
use crate::posterior::{
    calibrate_omega, choose_tau_relative, CalibrationOptions, DenseSolver, NystromSolver,
    PosteriorResult, PosteriorSolver, TruncatedSolver, DENSE_POSTERIOR_LIMIT,
};
use crate::spectral::{embed, largest_eigenvalue, low_spectrum, EigenOptions, Spectrum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    #[default]
    Dense,
    Truncated,
    Nystrom,
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Self::Dense),
            "truncated" => Ok(Self::Truncated),
            "nystrom" => Ok(Self::Nystrom),
            other => Err(Error::InvalidArgument(format!("unknown solver '{other}'"))),
        }
    }
}

/// A hyperparameter that is either resolved by its rule or pinned.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "AutoOrRepr", into = "AutoOrRepr")]
pub enum AutoOr {
    #[default]
    Auto,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum AutoOrRepr {
    Value(f64),
    Word(String),
}

impl TryFrom<AutoOrRepr> for AutoOr {
    type Error = String;

    fn try_from(r: AutoOrRepr) -> std::result::Result<Self, String> {
        match r {
            AutoOrRepr::Value(v) => Ok(Self::Fixed(v)),
            AutoOrRepr::Word(w) => w.parse().map_err(|e: Error| e.to_string()),
        }
    }
}

impl From<AutoOr> for AutoOrRepr {
    fn from(a: AutoOr) -> Self {
        match a {
            AutoOr::Auto => Self::Word("auto".into()),
            AutoOr::Fixed(v) => Self::Value(v),
        }
    }
}

impl FromStr for AutoOr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Self::Auto);
        }
        s.parse::<f64>()
            .map(Self::Fixed)
            .map_err(|_| Error::InvalidArgument(format!("expected 'auto' or a number, got '{s}'")))
    }
}

impl fmt::Display for AutoOr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Auto => f.write_str("auto"),
            Self::Fixed(v) => write!(f, "{v}"),
        }
    }
}

/// Everything the two phases need besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct PipelineConfig {
    /// Number of high-fidelity evaluations.
    pub m: usize,
    pub normalization: NormalizationMode,
    pub p: f64,
    pub q: f64,
    pub knn_k: usize,
    pub solver: SolverKind,
    /// Truncation size or landmark count; `4 M` when absent.
    pub k: Option<usize>,
    /// High-fidelity noise std in data units. Required.
    pub sigma: Option<f64>,
    pub beta: f64,
    pub r: f64,
    pub omega: AutoOr,
    pub tau: AutoOr,
    pub seed: u64,
    pub embed_dim: Option<usize>,
    pub saddle_method: Option<SaddleMethod>,
    pub rank_r: Option<usize>,
    pub metric: ErrorMetric,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            m: 0,
            normalization: NormalizationMode::None,
            p: 0.5,
            q: 0.5,
            knn_k: DEFAULT_KNN_K,
            solver: SolverKind::Dense,
            k: None,
            sigma: None,
            beta: HyperParameters::DEFAULT_BETA,
            r: HyperParameters::DEFAULT_R,
            omega: AutoOr::Auto,
            tau: AutoOr::Auto,
            seed: 0,
            embed_dim: None,
            saddle_method: None,
            rank_r: None,
            metric: ErrorMetric::FieldRelL2,
        }
    }
}

fn invalid(msg: String) -> Error {
    Error::InvalidArgument(msg)
}

impl PipelineConfig {
    /// Truncation size or landmark count for `n` points.
    pub fn effective_k(&self, n: usize) -> usize {
        self.k.unwrap_or(4 * self.m).clamp(1, n)
    }

    /// Checks everything that can be checked before touching the data values.
    pub fn validate(&self, n: usize) -> Result<()> {
        if n < 2 {
            return Err(invalid(format!("need at least 2 points, got {n}")));
        }
        if self.m > n {
            return Err(invalid(format!("M = {} exceeds N = {n}", self.m)));
        }
        if self.knn_k == 0 || self.knn_k >= n {
            return Err(invalid(format!("knn-k must be in 1..{n}, got {}", self.knn_k)));
        }
        if !(self.p.is_finite() && self.q.is_finite()) {
            return Err(invalid("p and q must be finite".into()));
        }
        if let Some(s) = self.sigma {
            if !(s.is_finite() && s > 0.0) {
                return Err(invalid(format!("sigma must be positive, got {s}")));
            }
        }
        if !(self.beta.is_finite() && self.beta >= 1.0) {
            return Err(invalid(format!("beta must be >= 1, got {}", self.beta)));
        }
        if !(self.r.is_finite() && self.r > 1.0) {
            return Err(invalid(format!("r must be > 1, got {}", self.r)));
        }
        for (name, v) in [("omega", self.omega), ("tau", self.tau)] {
            if let AutoOr::Fixed(x) = v {
                if !(x.is_finite() && x > 0.0) {
                    return Err(invalid(format!("{name} must be positive, got {x}")));
                }
            }
        }
        if let Some(k) = self.k {
            if k == 0 || k > n {
                return Err(invalid(format!("K must be in 1..={n}, got {k}")));
            }
        }
        if let Some(e) = self.embed_dim {
            if e == 0 || e > n {
                return Err(invalid(format!("embed-dim must be in 1..={n}, got {e}")));
            }
        }
        match self.solver {
            SolverKind::Dense if n > DENSE_POSTERIOR_LIMIT => {
                return Err(Error::DenseLimitExceeded {
                    n,
                    limit: DENSE_POSTERIOR_LIMIT,
                })
            }
            SolverKind::Nystrom if (self.p + self.q - 1.0).abs() > 1e-12 => {
                return Err(invalid(format!(
                    "the nystrom solver needs p + q = 1, got p = {}, q = {}",
                    self.p, self.q
                )))
            }
            _ => {}
        }
        Ok(())
    }

    fn require_sigma(&self) -> Result<f64> {
        self.sigma
            .ok_or_else(|| invalid("sigma is required (high-fidelity noise std)".into()))
    }

    /// Eigenpairs needed for the embedding and for choosing `tau`.
    fn base_spectrum_size(&self, n: usize) -> usize {
        (self.m.max(self.embed_dim.unwrap_or(self.m)) + 1).clamp(2, n)
    }
}

/// Wall-clock seconds spent in one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Default)]
struct Stopwatch(Vec<StageTiming>);

impl Stopwatch {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        self.0.push(StageTiming {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }
}

/// Output of the acquisition phase.
#[derive(Debug, Clone)]
pub struct PlanOutput {
    pub plan: AcquisitionPlan,
    /// Spectral coordinates of every point in original order (N x embed_dim).
    pub embedding: DMatrix<f64>,
    pub timings: Vec<StageTiming>,
}

fn graph_laplacian(lf: &DMatrix<f64>, cfg: &PipelineConfig, sw: &mut Stopwatch) -> Result<GraphLaplacian> {
    let graph = sw.time("graph", || build_graph(lf, cfg.knn_k).map(Arc::new))?;
    sw.time("laplacian", || laplacian(&graph, cfg.p, cfg.q))
}

/// Low spectrum of `l` (at least `want` pairs) and the smallest eigenvalue
/// above `1e-8 lambda_max`, growing the computed spectrum while every
/// computed eigenvalue is numerically zero.
fn spectrum_and_tau(
    l: &GraphLaplacian,
    base: usize,
    want: usize,
    sw: &mut Stopwatch,
) -> Result<(Spectrum, f64)> {
    let n = l.n();
    let opts = EigenOptions::default();
    let lambda_max = sw.time("lambda-max", || Ok(largest_eigenvalue(l)))?;
    let mut k = base.max(want);
    loop {
        let spectrum = sw.time("spectrum", || low_spectrum(l, k, &opts))?;
        match choose_tau_relative(spectrum.eigenvalues().as_slice(), lambda_max) {
            Ok(tau) => return Ok((spectrum, tau)),
            Err(Error::AllZeroSpectrum) if k < n => k = (2 * k).min(n),
            Err(e) => return Err(e),
        }
    }
}

/// Acquisition phase: normalize, build the graph and pick the `M` points.
pub fn plan(lf: &DMatrix<f64>, cfg: &PipelineConfig) -> Result<PlanOutput> {
    let n = lf.nrows();
    cfg.validate(n)?;
    let mut sw = Stopwatch::default();
    let data = Dataset::from_lf(lf.clone())?;
    let (normed, _) = sw.time("normalize", || normalize(&data, cfg.normalization))?;
    if cfg.m == 0 {
        return Ok(PlanOutput {
            plan: AcquisitionPlan {
                selected_indices: Vec::new(),
                permutation: (0..n).collect(),
                centroids: Vec::new(),
                cluster_assignment: Vec::new(),
                embed_dim: 0,
                seed: cfg.seed,
            },
            embedding: DMatrix::zeros(n, 0),
            timings: sw.0,
        });
    }
    let l = graph_laplacian(normed.lf(), cfg, &mut sw)?;
    let dim = cfg.embed_dim.unwrap_or(cfg.m);
    let spectrum = sw.time("spectrum", || {
        low_spectrum(&l, cfg.m.max(dim), &EigenOptions::default())
    })?;
    let plan = sw.time("acquisition", || {
        plan_acquisition(&spectrum, cfg.m, cfg.seed, cfg.embed_dim)
    })?;
    let embedding = embed(&spectrum, dim)?;
    info!("selected {} of {n} points", plan.m());
    Ok(PlanOutput {
        plan,
        embedding,
        timings: sw.0,
    })
}

/// Hyperparameters as used, plus the noise level in normalized units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedHyperParameters {
    pub sigma: f64,
    pub sigma_normalized: f64,
    pub omega: f64,
    pub tau: f64,
    pub beta: f64,
    pub r: f64,
    pub kappa: f64,
}

/// Output of the estimation phase, rows in plan order.
#[derive(Debug, Clone)]
pub struct EstimateOutput {
    /// Posterior in normalized coordinates.
    pub posterior: PosteriorResult,
    /// `lf + Phi*` mapped back to data units.
    pub mf_estimates: DMatrix<f64>,
    /// Posterior stddevs in data units.
    pub stddevs: DVector<f64>,
    pub hyperparameters: ResolvedHyperParameters,
    /// `(omega, mean unobserved stddev)` pairs visited by calibration.
    pub calibration_trace: Vec<(f64, f64)>,
    pub timings: Vec<StageTiming>,
}

/// Per-row factor converting normalized displacements to data units.
fn unit_scales(spec: &NormalizationSpec, n: usize) -> DVector<f64> {
    match spec.mode {
        NormalizationMode::None => DVector::from_element(n, 1.0),
        NormalizationMode::PerComponentStandardize => {
            let ms = spec.std.iter().map(|s| s * s).sum::<f64>() / spec.std.len() as f64;
            DVector::from_element(n, ms.sqrt())
        }
        NormalizationMode::PerInstanceUnitNorm => DVector::from_column_slice(&spec.scales),
    }
}

/// Estimation phase. `lf` is in plan order and `hf` holds the high-fidelity
/// rows of its first `M` points.
pub fn estimate(lf: &DMatrix<f64>, hf: &DMatrix<f64>, cfg: &PipelineConfig) -> Result<EstimateOutput> {
    let n = lf.nrows();
    cfg.validate(n)?;
    let m = hf.nrows();
    if m != cfg.m {
        return Err(Error::DimensionMismatch(format!(
            "expected {} high-fidelity rows, got {m}",
            cfg.m
        )));
    }
    let sigma = cfg.require_sigma()?;
    let mut sw = Stopwatch::default();
    let data = Dataset::new(lf.clone(), Some(hf.clone()), None)?;
    let (normed, spec) = sw.time("normalize", || normalize(&data, cfg.normalization))?;
    let scales = unit_scales(&spec, n);
    let obs = if m > 0 { m } else { n };
    let sigma_scale = scales.rows(0, obs).mean();
    let sigma_n = sigma / sigma_scale;

    let l = graph_laplacian(normed.lf(), cfg, &mut sw)?;
    let k = cfg.effective_k(n);
    let want = if cfg.solver == SolverKind::Truncated { k } else { 0 };
    let (spectrum, auto_tau) = spectrum_and_tau(&l, cfg.base_spectrum_size(n), want, &mut sw)?;
    let tau = match cfg.tau {
        AutoOr::Auto => auto_tau,
        AutoOr::Fixed(t) => t,
    };

    let solver: Box<dyn PosteriorSolver> = sw.time("factor", || -> Result<Box<dyn PosteriorSolver>> {
        Ok(match cfg.solver {
            SolverKind::Dense => Box::new(DenseSolver::new(l.clone(), false)?),
            SolverKind::Truncated => Box::new(TruncatedSolver::new(Arc::new(spectrum.truncated(k)?))),
            SolverKind::Nystrom => {
                let landmarks = select_landmarks(n, m, k, cfg.seed)?;
                let opts = NystromOptions { rank_r: cfg.rank_r };
                let factors = nystrom_general_p(l.graph().as_ref(), &landmarks, cfg.p, &opts)?;
                Box::new(NystromSolver::new(Arc::new(factors), cfg.saddle_method))
            }
        })
    })?;

    let template = HyperParameters::new(sigma_n, 1.0, tau, cfg.beta, cfg.r)?;
    let (hp, trace) = match cfg.omega {
        AutoOr::Fixed(w) => (template.with_omega(w)?, Vec::new()),
        AutoOr::Auto => {
            let cal = sw.time("calibrate", || {
                calibrate_omega(solver.as_ref(), &template, m, &CalibrationOptions::default())
            })?;
            (template.with_omega(cal.omega)?, cal.trace)
        }
    };

    let posterior = sw.time("solve", || {
        if m == 0 {
            Ok(PosteriorResult {
                phi_star: DMatrix::zeros(n, lf.ncols()),
                stddevs: solver.stddevs(0, &hp)?,
                covariance: None,
                solver_tag: solver.tag(),
            })
        } else {
            let phi_hat = normed.hf().expect("hf attached") - normed.lf().rows(0, m);
            solver.solve(&phi_hat, &hp)
        }
    })?;

    let mf_estimates = sw.time("denormalize", || {
        if m == 0 {
            Ok(lf.clone())
        } else {
            spec.invert(&posterior.mf_estimates(normed.lf())?)
        }
    })?;
    let stddevs = posterior.stddevs.component_mul(&scales);
    Ok(EstimateOutput {
        posterior,
        mf_estimates,
        stddevs,
        hyperparameters: ResolvedHyperParameters {
            sigma,
            sigma_normalized: sigma_n,
            omega: hp.omega(),
            tau: hp.tau(),
            beta: hp.beta(),
            r: hp.r(),
            kappa: hp.kappa(),
        },
        calibration_trace: trace,
        timings: sw.0,
    })
}

/// Result of a full synthetic run.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub plan: PlanOutput,
    pub estimate: EstimateOutput,
    /// Multi-fidelity estimates in original row order.
    pub mf_estimates: DMatrix<f64>,
    /// Posterior stddevs in original row order.
    pub stddevs: DVector<f64>,
    pub report: ErrorReport,
}

impl PipelineRun {
    pub fn timings(&self) -> Vec<StageTiming> {
        let mut all = self.plan.timings.clone();
        for t in &self.estimate.timings {
            all.push(StageTiming {
                stage: format!("estimate.{}", t.stage),
                seconds: t.seconds,
            });
        }
        all
    }
}

/// Plans, queries the problem's high-fidelity oracle for the selected points
/// only, estimates, and scores against the noiseless truth. A missing `sigma`
/// is taken from the problem's noise level.
pub fn run_pipeline(problem: &SyntheticProblem, cfg: &PipelineConfig) -> Result<PipelineRun> {
    let mut cfg = cfg.clone();
    if cfg.sigma.is_none() {
        cfg.sigma = Some(problem.hf_noise_sigma);
    }
    let planned = plan(&problem.lf_data, &cfg)?;
    let perm = &planned.plan.permutation;
    let lf = gather_rows(&problem.lf_data, perm);
    let hf = problem.hf_rows(&planned.plan.selected_indices);
    let est = estimate(&lf, &hf, &cfg)?;
    let inv = invert_permutation(perm);
    let mf = gather_rows(&est.mf_estimates, &inv);
    let stddevs = DVector::from_iterator(inv.len(), inv.iter().map(|&j| est.stddevs[j]));
    let report = ErrorReport::compute(&problem.lf_data, &mf, &problem.true_data, cfg.metric)?;
    info!(
        "mean error lf {:.3}%, mf {:.3}%, reduction {:.2}%",
        report.mean_lf, report.mean_mf, report.reduction
    );
    Ok(PipelineRun {
        plan: planned,
        estimate: est,
        mf_estimates: mf,
        stddevs,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::synthetic::{generate, GeneratorId, SyntheticSpec};

    fn small_problem(seed: u64) -> SyntheticProblem {
        generate(&SyntheticSpec {
            generator: GeneratorId::ClusteredShift,
            n: 90,
            d: 3,
            clusters: 3,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn cfg(m: usize) -> PipelineConfig {
        PipelineConfig {
            m,
            ..Default::default()
        }
    }

    #[test]
    fn auto_or_parses_and_round_trips() {
        assert_eq!("auto".parse::<AutoOr>().unwrap(), AutoOr::Auto);
        assert_eq!("0.25".parse::<AutoOr>().unwrap(), AutoOr::Fixed(0.25));
        assert!("x".parse::<AutoOr>().is_err());
        let c = PipelineConfig {
            omega: AutoOr::Fixed(2.0),
            sigma: Some(0.1),
            ..cfg(3)
        };
        let text = serde_json::to_string(&c).unwrap();
        assert!(text.contains("\"tau\":\"auto\""));
        assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), c);
    }

    #[test]
    fn validation_catches_bad_configs() {
        assert!(cfg(100).validate(90).is_err());
        let mut c = cfg(3);
        c.solver = SolverKind::Nystrom;
        c.p = 1.0;
        assert!(c.validate(90).is_err());
        c.q = 0.0;
        assert!(c.validate(90).is_ok());
        c.k = Some(0);
        assert!(c.validate(90).is_err());
        let lf = DMatrix::from_element(10, 2, 1.0);
        assert!(matches!(
            estimate(&lf, &DMatrix::zeros(0, 2), &cfg(0)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn default_k_is_four_m() {
        assert_eq!(cfg(3).effective_k(90), 12);
        assert_eq!(cfg(30).effective_k(90), 90);
    }

    #[test]
    fn no_observations_leave_lf_unchanged() {
        let p = small_problem(1);
        let run = run_pipeline(&p, &cfg(0)).unwrap();
        assert_eq!(run.mf_estimates, p.lf_data);
        assert_eq!(run.report.reduction, 0.0);
        assert!(run.stddevs.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn one_observation_per_cluster_reduces_error() {
        let p = small_problem(2);
        let run = run_pipeline(&p, &cfg(3)).unwrap();
        let labels = p.cluster_labels.as_ref().unwrap();
        let mut hit: Vec<usize> = run.plan.plan.selected_indices.iter().map(|&i| labels[i]).collect();
        hit.sort_unstable();
        assert_eq!(hit, vec![0, 1, 2]);
        assert!(run.report.reduction > 0.0, "{:?}", run.report.reduction);
        let target = 3.0 * p.hf_noise_sigma;
        let mean = run.estimate.stddevs.rows(3, 87).mean();
        assert!((mean - target).abs() <= 1e-6 * target);
    }

    #[test]
    fn rerun_is_bit_identical() {
        let p = small_problem(3);
        let a = run_pipeline(&p, &cfg(3)).unwrap();
        let b = run_pipeline(&p, &cfg(3)).unwrap();
        assert_eq!(a.mf_estimates, b.mf_estimates);
        assert_eq!(a.plan.plan, b.plan.plan);
    }

    #[test]
    fn unit_norm_round_trip_keeps_errors_in_data_units() {
        let p = small_problem(4);
        let mut c = cfg(3);
        c.normalization = NormalizationMode::PerInstanceUnitNorm;
        let run = run_pipeline(&p, &c).unwrap();
        assert!(run.report.reduction > 0.0);
        let recomputed =
            ErrorReport::compute(&p.lf_data, &run.mf_estimates, &p.true_data, c.metric).unwrap();
        assert_eq!(recomputed, run.report);
    }

    #[test]
    fn timings_cover_every_stage() {
        let run = run_pipeline(&small_problem(5), &cfg(3)).unwrap();
        let names: Vec<String> = run.timings().into_iter().map(|t| t.stage).collect();
        for s in ["normalize", "graph", "spectrum", "acquisition", "estimate.calibrate", "estimate.solve"] {
            assert!(names.iter().any(|n| n == s), "missing {s} in {names:?}");
        }
    }
}
