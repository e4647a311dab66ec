//! Gaussian posterior over the displacement field.
//!
//! With `P` selecting the first `M` rows and the prior precision
//! `G = D^(p-q) (L + tau I)^beta`, the posterior precision is
//! `A = P^T P / sigma^2 + omega G`, the covariance `C = A^-1` and the MAP
//! estimate solves `A Phi* = P^T Phi_hat / sigma^2`, one column at a time.

use std::sync::{Arc, Mutex};

use log::debug;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::HyperParameters;
use crate::error::{Error, Result};
use crate::graph::GraphLaplacian;
use crate::linalg;
use crate::nystrom::{self, LowRankLaplacian, NystromCovariance, SaddleMethod};
use crate::spectral::{self, Spectrum};

/// Largest N accepted by the dense solver.
pub const DENSE_POSTERIOR_LIMIT: usize = 3_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverTag {
    Dense,
    Truncated,
    Nystrom,
}

/// MAP displacements and per-point posterior spread.
#[derive(Debug, Clone)]
pub struct PosteriorResult {
    pub phi_star: DMatrix<f64>,
    /// `sqrt(C_ii)`.
    pub stddevs: DVector<f64>,
    pub covariance: Option<DMatrix<f64>>,
    pub solver_tag: SolverTag,
}

impl PosteriorResult {
    /// Multi-fidelity estimates `lf + Phi*`.
    pub fn mf_estimates(&self, lf: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if lf.shape() != self.phi_star.shape() {
            return Err(Error::DimensionMismatch(format!(
                "lf {:?} vs phi_star {:?}",
                lf.shape(),
                self.phi_star.shape()
            )));
        }
        Ok(lf + &self.phi_star)
    }
}

fn is_small_integer(beta: f64) -> bool {
    beta.fract() == 0.0 && (1.0..=64.0).contains(&beta)
}

/// `(S + tau I)^beta` for symmetric `S`: repeated squaring for integer
/// exponents, eigendecomposition otherwise.
fn shifted_matrix_power(s: &DMatrix<f64>, tau: f64, beta: f64) -> DMatrix<f64> {
    let n = s.nrows();
    let mut base = s.clone();
    for i in 0..n {
        base[(i, i)] += tau;
    }
    let mut out = if is_small_integer(beta) {
        let mut e = beta as u32;
        let mut acc: Option<DMatrix<f64>> = None;
        loop {
            if e & 1 == 1 {
                acc = Some(match acc {
                    None => base.clone(),
                    Some(a) => &a * &base,
                });
            }
            e >>= 1;
            if e == 0 {
                break;
            }
            base = &base * &base;
        }
        acc.expect("beta >= 1")
    } else {
        let eig = SymmetricEigen::new(base);
        let vals = eig.eigenvalues.map(|v| v.max(0.0).powf(beta));
        let mut scaled = eig.eigenvectors.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= vals[j];
        }
        scaled * eig.eigenvectors.transpose()
    };
    crate::graph::symmetrize(&mut out);
    out
}

/// Prior precision `G = D^(p-q) (L + tau I)^beta`, assembled in the
/// symmetric form `D^h (L_sym + tau I)^beta D^h` with `h = (p-q)/2`.
pub fn prior_precision(l: &GraphLaplacian, tau: f64, beta: f64) -> DMatrix<f64> {
    let mut g = shifted_matrix_power(&l.symmetric_form(), tau, beta);
    let h = 0.5 * (l.p() - l.q());
    if h != 0.0 {
        let s = l.degrees().map(|d| d.powf(h));
        let n = g.nrows();
        for j in 0..n {
            for i in 0..n {
                g[(i, j)] *= s[i] * s[j];
            }
        }
    }
    g
}

/// `R(Theta) = <Theta, (L + tau I)^beta Theta>` in the reweighted Frobenius
/// product, i.e. `tr(Theta^T G Theta)`.
pub fn prior_energy(g: &DMatrix<f64>, theta: &DMatrix<f64>) -> f64 {
    (theta.transpose() * g * theta).trace()
}

fn check_dense(n: usize) -> Result<()> {
    if n > DENSE_POSTERIOR_LIMIT {
        return Err(Error::DenseLimitExceeded {
            n,
            limit: DENSE_POSTERIOR_LIMIT,
        });
    }
    Ok(())
}

fn precision_matrix(g: &DMatrix<f64>, m: usize, hp: &HyperParameters) -> DMatrix<f64> {
    let mut a = g * hp.omega();
    let w = 1.0 / hp.sigma().powi(2);
    for i in 0..m {
        a[(i, i)] += w;
    }
    a
}

fn padded_rhs(phi_hat: &DMatrix<f64>, n: usize, scale: f64) -> DMatrix<f64> {
    let mut rhs = DMatrix::zeros(n, phi_hat.ncols());
    rhs.rows_mut(0, phi_hat.nrows()).copy_from(&(phi_hat * scale));
    rhs
}

fn dense_from_prior(
    g: &DMatrix<f64>,
    phi_hat: &DMatrix<f64>,
    hp: &HyperParameters,
    want_cov: bool,
) -> Result<PosteriorResult> {
    let n = g.nrows();
    let m = phi_hat.nrows();
    if m > n {
        return Err(Error::DimensionMismatch(format!("{m} observations for {n} points")));
    }
    if !crate::data::all_finite(phi_hat) {
        return Err(Error::NonFiniteInput);
    }
    let a = precision_matrix(g, m, hp);
    let chol = a.clone().cholesky().ok_or(Error::SingularSystem)?;
    let phi_star = chol.solve(&padded_rhs(phi_hat, n, 1.0 / hp.sigma().powi(2)));
    let (stddevs, covariance) = if want_cov {
        let mut c = chol.inverse();
        crate::graph::symmetrize(&mut c);
        (c.diagonal().map(f64::sqrt), Some(c))
    } else {
        (linalg::spd_inverse_diagonal(a)?.map(f64::sqrt), None)
    };
    Ok(PosteriorResult {
        phi_star,
        stddevs,
        covariance,
        solver_tag: SolverTag::Dense,
    })
}

/// Exact posterior by Cholesky factorization of the dense precision.
pub fn dense_posterior(
    l: &GraphLaplacian,
    phi_hat: &DMatrix<f64>,
    hp: &HyperParameters,
    want_cov: bool,
) -> Result<PosteriorResult> {
    check_dense(l.n())?;
    let g = prior_precision(l, hp.tau(), hp.beta());
    dense_from_prior(&g, phi_hat, hp, want_cov)
}

/// Common interface of the three posterior back ends.
pub trait PosteriorSolver: Sync {
    fn tag(&self) -> SolverTag;

    fn n(&self) -> usize;

    /// Posterior standard deviations when the first `m` points are observed.
    fn stddevs(&self, m: usize, hp: &HyperParameters) -> Result<DVector<f64>>;

    fn solve(&self, phi_hat: &DMatrix<f64>, hp: &HyperParameters) -> Result<PosteriorResult>;
}

/// `(tau, beta, G)` of the last prior built.
type PriorCache = Option<(f64, f64, Arc<DMatrix<f64>>)>;

/// Dense reference solver; caches the prior precision per `(tau, beta)`.
pub struct DenseSolver {
    laplacian: GraphLaplacian,
    want_cov: bool,
    prior: Mutex<PriorCache>,
}

impl DenseSolver {
    pub fn new(laplacian: GraphLaplacian, want_cov: bool) -> Result<Self> {
        check_dense(laplacian.n())?;
        Ok(Self {
            laplacian,
            want_cov,
            prior: Mutex::new(None),
        })
    }

    pub fn laplacian(&self) -> &GraphLaplacian {
        &self.laplacian
    }

    pub fn prior(&self, tau: f64, beta: f64) -> Arc<DMatrix<f64>> {
        let mut slot = self.prior.lock().expect("prior cache poisoned");
        if let Some((t, b, g)) = slot.as_ref() {
            if *t == tau && *b == beta {
                return Arc::clone(g);
            }
        }
        let g = Arc::new(prior_precision(&self.laplacian, tau, beta));
        *slot = Some((tau, beta, Arc::clone(&g)));
        g
    }
}

impl PosteriorSolver for DenseSolver {
    fn tag(&self) -> SolverTag {
        SolverTag::Dense
    }

    fn n(&self) -> usize {
        self.laplacian.n()
    }

    fn stddevs(&self, m: usize, hp: &HyperParameters) -> Result<DVector<f64>> {
        let g = self.prior(hp.tau(), hp.beta());
        let a = precision_matrix(&g, m, hp);
        Ok(linalg::spd_inverse_diagonal(a)?.map(f64::sqrt))
    }

    fn solve(&self, phi_hat: &DMatrix<f64>, hp: &HyperParameters) -> Result<PosteriorResult> {
        let g = self.prior(hp.tau(), hp.beta());
        dense_from_prior(&g, phi_hat, hp, self.want_cov)
    }
}

/// Posterior restricted to the span of the low-lying eigenvectors.
pub struct TruncatedSolver {
    spectrum: Arc<Spectrum>,
}

impl TruncatedSolver {
    pub fn new(spectrum: Arc<Spectrum>) -> Self {
        Self { spectrum }
    }

    pub fn spectrum(&self) -> &Arc<Spectrum> {
        &self.spectrum
    }
}

impl PosteriorSolver for TruncatedSolver {
    fn tag(&self) -> SolverTag {
        SolverTag::Truncated
    }

    fn n(&self) -> usize {
        self.spectrum.n()
    }

    fn stddevs(&self, m: usize, hp: &HyperParameters) -> Result<DVector<f64>> {
        Ok(spectral::truncated_variances_for(&self.spectrum, m, hp)?.map(|v| v.max(0.0).sqrt()))
    }

    fn solve(&self, phi_hat: &DMatrix<f64>, hp: &HyperParameters) -> Result<PosteriorResult> {
        let tp = spectral::truncated_posterior(&self.spectrum, phi_hat, hp)?;
        Ok(PosteriorResult {
            phi_star: tp.phi_star(),
            stddevs: spectral::truncated_variances(&tp).map(|v| v.max(0.0).sqrt()),
            covariance: None,
            solver_tag: SolverTag::Truncated,
        })
    }
}

/// Low-rank solver on Nystrom factors.
pub struct NystromSolver {
    factors: Arc<LowRankLaplacian>,
    method: Option<SaddleMethod>,
}

impl NystromSolver {
    /// `method = None` picks by the number of right-hand sides.
    pub fn new(factors: Arc<LowRankLaplacian>, method: Option<SaddleMethod>) -> Self {
        Self { factors, method }
    }

    pub fn factors(&self) -> &Arc<LowRankLaplacian> {
        &self.factors
    }
}

impl PosteriorSolver for NystromSolver {
    fn tag(&self) -> SolverTag {
        SolverTag::Nystrom
    }

    fn n(&self) -> usize {
        self.factors.n()
    }

    fn stddevs(&self, m: usize, hp: &HyperParameters) -> Result<DVector<f64>> {
        let ops = nystrom::build_saddle(&self.factors, hp, m)?;
        Ok(NystromCovariance::new(&ops)?.diag().map(|v| v.max(0.0).sqrt()))
    }

    fn solve(&self, phi_hat: &DMatrix<f64>, hp: &HyperParameters) -> Result<PosteriorResult> {
        let ops = nystrom::build_saddle(&self.factors, hp, phi_hat.nrows())?;
        let method = self
            .method
            .unwrap_or_else(|| SaddleMethod::default_for(phi_hat.ncols()));
        let phi_star = nystrom::solve_map_saddle(&ops, phi_hat, method)?;
        let stddevs = NystromCovariance::new(&ops)?.diag().map(|v| v.max(0.0).sqrt());
        Ok(PosteriorResult {
            phi_star,
            stddevs,
            covariance: None,
            solver_tag: SolverTag::Nystrom,
        })
    }
}

/// Mean of `stddevs[m..]`, the unobserved points.
pub fn mean_unobserved_stddev(stddevs: &DVector<f64>, m: usize) -> Result<f64> {
    let n = stddevs.len();
    if m >= n {
        return Err(Error::InvalidArgument(format!(
            "no unobserved points (M = {m}, N = {n})"
        )));
    }
    Ok(stddevs.rows(m, n - m).sum() / (n - m) as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct CalibrationOptions {
    /// Initial `(omega_lo, omega_hi)`; widened by decades as needed.
    pub bracket: (f64, f64),
    /// Total decades the bracket may grow by.
    pub max_decades: u32,
    /// Stop when the mean stddev is within this relative distance of `r sigma`.
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            bracket: (1e-3, 1e3),
            max_decades: 60,
            rel_tol: 1e-10,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub omega: f64,
    /// Mean unobserved stddev at `omega`.
    pub mean_stddev: f64,
    pub target: f64,
    /// Every `(omega, mean stddev)` evaluated, in order.
    pub trace: Vec<(f64, f64)>,
}

/// Finds `omega` with mean unobserved stddev equal to `r sigma` by
/// bisection in `log omega`. `sigma`, `tau`, `beta`, `r` come from `template`.
pub fn calibrate_omega(
    solver: &dyn PosteriorSolver,
    template: &HyperParameters,
    m: usize,
    opts: &CalibrationOptions,
) -> Result<Calibration> {
    let target = template.r() * template.sigma();
    let (mut lo, mut hi) = opts.bracket;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::InvalidArgument(format!("bad bracket ({lo}, {hi})")));
    }
    let mut trace = Vec::new();
    let eval = |omega: f64, trace: &mut Vec<(f64, f64)>| -> Result<f64> {
        let hp = template.with_omega(omega)?;
        let v = mean_unobserved_stddev(&solver.stddevs(m, &hp)?, m)?;
        trace.push((omega, v));
        Ok(v)
    };
    // a precision that is numerically singular at the weak-prior end only
    // means that end is unusable; start from the weakest prior that factors
    let mut f_lo = loop {
        match eval(lo, &mut trace) {
            Ok(v) => break v,
            Err(Error::SingularSystem) if lo * 10.0 < hi => lo *= 10.0,
            Err(e) => return Err(e),
        }
    };
    let mut f_hi = eval(hi, &mut trace)?;
    let mut decades = 0;
    while f_lo < target || f_hi > target {
        if decades >= opts.max_decades {
            return Err(Error::NoBracket {
                target,
                low: f_hi,
                high: f_lo,
            });
        }
        decades += 1;
        if f_lo < target {
            hi = lo;
            f_hi = f_lo;
            lo /= 10.0;
            f_lo = eval(lo, &mut trace)?;
        } else {
            lo = hi;
            f_lo = f_hi;
            hi *= 10.0;
            f_hi = eval(hi, &mut trace)?;
        }
    }
    let mut best = if (f_lo - target).abs() <= (f_hi - target).abs() {
        (lo, f_lo)
    } else {
        (hi, f_hi)
    };
    for _ in 0..opts.max_iter {
        if (best.1 - target).abs() <= opts.rel_tol * target || hi / lo - 1.0 <= 1e-15 {
            break;
        }
        let mid = (lo * hi).sqrt();
        let f = eval(mid, &mut trace)?;
        if (f - target).abs() < (best.1 - target).abs() {
            best = (mid, f);
        }
        if f > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    debug!(
        "calibrated omega = {:.6e} after {} evaluations",
        best.0,
        trace.len()
    );
    Ok(Calibration {
        omega: best.0,
        mean_stddev: best.1,
        target,
        trace,
    })
}

/// Smallest eigenvalue above `1e-8 * lambda_max` of the given ascending set.
pub fn choose_tau_from(eigenvalues: &[f64]) -> Result<f64> {
    if eigenvalues.len() < 2 {
        return Err(Error::InsufficientSpectrum {
            available: eigenvalues.len(),
            required: 2,
        });
    }
    let top = eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-8 * top;
    eigenvalues
        .iter()
        .copied()
        .filter(|&l| l > tol && l > 0.0)
        .fold(None, |acc: Option<f64>, l| Some(acc.map_or(l, |a| a.min(l))))
        .ok_or(Error::AllZeroSpectrum)
}

/// Smallest eigenvalue above `1e-8 * lambda_max`, with `lambda_max` supplied
/// separately so the zero cutoff does not depend on how many low
/// eigenvalues were computed.
pub fn choose_tau_relative(eigenvalues: &[f64], lambda_max: f64) -> Result<f64> {
    if !(lambda_max > 0.0) {
        return Err(Error::AllZeroSpectrum);
    }
    let tol = 1e-8 * lambda_max;
    eigenvalues
        .iter()
        .copied()
        .filter(|&l| l > tol)
        .fold(None, |acc: Option<f64>, l| Some(acc.map_or(l, |a| a.min(l))))
        .ok_or(Error::AllZeroSpectrum)
}

/// `tau` = smallest non-zero eigenvalue of the computed spectrum.
pub fn choose_tau(spectrum: &Spectrum) -> Result<f64> {
    choose_tau_from(spectrum.eigenvalues().as_slice())
}

/// `omega_n = c delta_n^s`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OmegaRule {
    pub c: f64,
    pub s: f64,
}

impl OmegaRule {
    pub fn omega(&self, delta: f64) -> f64 {
        self.c * delta.powf(self.s)
    }
}

/// MAP iterates along a vanishing-noise schedule and their limit.
#[derive(Debug, Clone)]
pub struct RegularizationPath {
    pub deltas: Vec<f64>,
    pub omegas: Vec<f64>,
    pub iterates: Vec<DMatrix<f64>>,
    /// Minimum-energy field matching the exact observations.
    pub limit: DMatrix<f64>,
}

impl RegularizationPath {
    /// `|Phi*_n - Phi*_inf|_F / |Phi*_inf|_F` for each iterate.
    pub fn relative_errors(&self) -> Vec<f64> {
        let scale = self.limit.norm();
        self.iterates
            .iter()
            .map(|x| (x - &self.limit).norm() / scale)
            .collect()
    }
}

/// Minimizer of `tr(Theta^T G Theta)` subject to `Theta[..m] = observed`:
/// the free block solves `G22 Theta2 = -G21 Theta1`.
pub fn constrained_minimizer(g: &DMatrix<f64>, observed: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = g.nrows();
    let m = observed.nrows();
    if m > n || m == 0 {
        return Err(Error::DimensionMismatch(format!("{m} constraints for {n} points")));
    }
    let mut out = DMatrix::zeros(n, observed.ncols());
    out.rows_mut(0, m).copy_from(observed);
    if m < n {
        let g22 = g.view((m, m), (n - m, n - m)).into_owned();
        let g21 = g.view((m, 0), (n - m, m));
        let rhs = -(g21 * observed);
        let free = linalg::spd_solve(g22, &rhs)?;
        out.rows_mut(m, n - m).copy_from(&free);
    }
    Ok(out)
}

/// Solves the unit-noise MAP problem `(P^T P + omega G) Theta = P^T Phi_hat`
/// along `deltas`, with observations perturbed by a fixed random direction
/// scaled to Frobenius norm `delta_n`.
pub fn regularization_path(
    l: &GraphLaplacian,
    observed: &DMatrix<f64>,
    tau: f64,
    beta: f64,
    deltas: &[f64],
    rule: OmegaRule,
    seed: u64,
) -> Result<RegularizationPath> {
    if !(rule.s < 2.0) {
        return Err(Error::InvalidSchedule(format!(
            "exponent s = {} must be below 2",
            rule.s
        )));
    }
    if !(rule.c > 0.0) {
        return Err(Error::InvalidSchedule(format!("c = {} must be positive", rule.c)));
    }
    if deltas.is_empty() || deltas.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::InvalidSchedule("noise scales must be positive".into()));
    }
    if deltas.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidSchedule(
            "noise scales must be strictly decreasing".into(),
        ));
    }
    check_dense(l.n())?;
    let n = l.n();
    let m = observed.nrows();
    let g = prior_precision(l, tau, beta);
    let limit = constrained_minimizer(&g, observed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction: DMatrix<f64> =
        DMatrix::from_fn(m, observed.ncols(), |_, _| StandardNormal.sample(&mut rng));
    let direction = &direction / direction.norm();

    let unit = HyperParameters::new(1.0, 1.0, tau, beta, 3.0)?;
    let mut omegas = Vec::with_capacity(deltas.len());
    let mut iterates = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let omega = rule.omega(delta);
        let hp = unit.with_omega(omega)?;
        let phi_hat = observed + &direction * delta;
        let a = precision_matrix(&g, m, &hp);
        let sol = linalg::spd_solve(a, &padded_rhs(&phi_hat, n, 1.0))?;
        omegas.push(omega);
        iterates.push(sol);
    }
    Ok(RegularizationPath {
        deltas: deltas.to_vec(),
        omegas,
        iterates,
        limit,
    })
}
