//! Nystrom-QR low-rank approximation of the Laplacian and the saddle-point,
//! Woodbury and covariance algebra built on it.
//!
//! With landmarks `X`, `W ~ W(:,X) W(X,X)^+ W(X,:)`. The approximate degrees
//! are `D^ = W(:,X) (W(X,X)^+ (W(X,:) 1))`, and a thin QR of
//! `D^^-1/2 W(:,X) = Q R` followed by `R W(X,X)^+ R^T = G S G^T` gives
//! `I - L_sym ~ U~ S U~^T` with `U~ = Q G` orthonormal.
//!
//! For `p + q = 1` the factors become `U = D^^(1/2-p) U~` and
//! `V = D^^(p-1/2) U~`, so that `I - L ~ U S V^T` and `V^T U = I`.
//! The MAP system is then `(Theta - V Xi V^T) Phi = P^T Phi_hat` with
//! diagonal `Theta` and `Xi`.

use std::borrow::Cow;

use log::debug;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::HyperParameters;
use crate::error::{Error, Result};
use crate::graph::WeightColumns;
use crate::krylov::{self, IterOptions};

/// Relative eigenvalue cutoff of the landmark-block pseudoinverse.
pub const PINV_RTOL: f64 = 1e-12;

/// Columns whose `|Xi_ii|` falls below this fraction of the largest are dropped.
pub const XI_DROP_RTOL: f64 = 1e-10;

/// Relative residual target of the iterative saddle solves.
pub const SADDLE_TOL: f64 = 1e-10;

/// Landmarks: every observed index `0..m` plus distinct uniform draws from
/// the rest until `max(k, m)` indices are chosen. Returned sorted.
pub fn select_landmarks(n: usize, m: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if m > n || k > n {
        return Err(Error::InvalidArgument(format!(
            "landmark count {k} and observed count {m} must not exceed N = {n}"
        )));
    }
    let total = k.max(m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extra = rand::seq::index::sample(&mut rng, n - m, total - m);
    let mut out: Vec<usize> = (0..m).chain(extra.into_iter().map(|i| i + m)).collect();
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NystromOptions {
    /// Keep only the `r` largest-magnitude eigenvalues of `W(X,X)`.
    pub rank_r: Option<usize>,
}

/// Nystrom factors of the normalized Laplacian.
#[derive(Debug, Clone)]
pub struct LowRankLaplacian {
    landmarks: Vec<usize>,
    u_tilde: DMatrix<f64>,
    sigma: DVector<f64>,
    d_hat: DVector<f64>,
    p: f64,
}

impl LowRankLaplacian {
    pub fn landmarks(&self) -> &[usize] {
        &self.landmarks
    }

    pub fn n(&self) -> usize {
        self.u_tilde.nrows()
    }

    /// Number of retained factor columns.
    pub fn k(&self) -> usize {
        self.u_tilde.ncols()
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Orthonormal factor of the symmetric form.
    pub fn u_tilde(&self) -> &DMatrix<f64> {
        &self.u_tilde
    }

    /// Approximate eigenvalues of `I - L`, descending.
    pub fn sigma(&self) -> &DVector<f64> {
        &self.sigma
    }

    pub fn d_hat(&self) -> &DVector<f64> {
        &self.d_hat
    }

    /// Approximate low-lying eigenvalues `1 - sigma_i` of `L`, ascending.
    pub fn approximate_spectrum(&self) -> DVector<f64> {
        self.sigma.map(|s| 1.0 - s)
    }

    fn scaled(&self, e: f64) -> Cow<'_, DMatrix<f64>> {
        if e == 0.0 {
            return Cow::Borrowed(&self.u_tilde);
        }
        let s = self.d_hat.map(|d| d.powf(e));
        let mut out = self.u_tilde.clone();
        for mut col in out.column_iter_mut() {
            col.component_mul_assign(&s);
        }
        Cow::Owned(out)
    }

    /// `U = D^^(1/2-p) U~`.
    pub fn u(&self) -> Cow<'_, DMatrix<f64>> {
        self.scaled(0.5 - self.p)
    }

    /// `V = D^^(p-1/2) U~`.
    pub fn v(&self) -> Cow<'_, DMatrix<f64>> {
        self.scaled(self.p - 0.5)
    }
}

/// Nystrom-QR factorization for the symmetric normalization `p = q = 1/2`.
pub fn nystrom_factor(
    weights: &dyn WeightColumns,
    landmarks: &[usize],
    opts: &NystromOptions,
) -> Result<LowRankLaplacian> {
    nystrom_general_p(weights, landmarks, 0.5, opts)
}

/// Nystrom-QR factorization for `L = D^-p (D - W) D^-(1-p)`.
pub fn nystrom_general_p(
    weights: &dyn WeightColumns,
    landmarks: &[usize],
    p: f64,
    opts: &NystromOptions,
) -> Result<LowRankLaplacian> {
    let n = weights.n();
    validate_landmarks(landmarks, n)?;
    let c = weights.columns(landmarks);
    let mut wxx = c.select_rows(landmarks);
    crate::graph::symmetrize(&mut wxx);
    let pinv = landmark_pinv(wxx, opts.rank_r)?;

    let ones = DVector::from_element(n, 1.0);
    let d_hat = &c * (&pinv * c.tr_mul(&ones));
    if let Some(index) = d_hat.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::NegativeApproxDegree { index });
    }

    let mut z = c;
    let inv_sqrt = d_hat.map(|d| 1.0 / d.sqrt());
    z.par_column_iter_mut()
        .for_each(|mut col| col.component_mul_assign(&inv_sqrt));
    let qr = z.qr();
    let (q, r) = qr.unpack();
    let mut t = &r * &pinv * r.transpose();
    crate::graph::symmetrize(&mut t);
    let (sigma, gamma) = crate::linalg::sym_eigen_desc(&t);
    let u_tilde = q * gamma;
    debug!(
        "nystrom factor: N = {n}, K = {}, sigma in [{:.3e}, {:.3e}]",
        sigma.len(),
        sigma.min(),
        sigma.max()
    );
    Ok(LowRankLaplacian {
        landmarks: landmarks.to_vec(),
        u_tilde,
        sigma,
        d_hat,
        p,
    })
}

fn validate_landmarks(landmarks: &[usize], n: usize) -> Result<()> {
    if landmarks.is_empty() || landmarks.len() > n {
        return Err(Error::InvalidArgument(format!(
            "need 1..={n} landmarks, got {}",
            landmarks.len()
        )));
    }
    let mut seen = vec![false; n];
    for &i in landmarks {
        if i >= n || seen[i] {
            return Err(Error::InvalidArgument(format!(
                "landmark {i} is out of range or repeated"
            )));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Pseudoinverse of the symmetric landmark block via its eigendecomposition.
fn landmark_pinv(wxx: DMatrix<f64>, rank_r: Option<usize>) -> Result<DMatrix<f64>> {
    let k = wxx.nrows();
    let eig = SymmetricEigen::new(wxx);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .abs()
            .total_cmp(&eig.eigenvalues[a].abs())
            .then(a.cmp(&b))
    });
    let top = eig.eigenvalues[order[0]].abs();
    if !(top > 0.0) {
        return Err(Error::SingularLandmarkBlock);
    }
    let keep = rank_r.unwrap_or(k).min(k);
    let mut inv = DVector::zeros(k);
    for &i in order.iter().take(keep) {
        let lam = eig.eigenvalues[i];
        if lam.abs() > PINV_RTOL * top {
            inv[i] = 1.0 / lam;
        }
    }
    let e = &eig.eigenvectors;
    let mut scaled = e.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= inv[j];
    }
    let mut out = scaled * e.transpose();
    crate::graph::symmetrize(&mut out);
    Ok(out)
}

/// Diagonal operators of the low-rank MAP system.
#[derive(Debug, Clone)]
pub struct SaddleOperators {
    theta: DVector<f64>,
    xi: DVector<f64>,
    basis: DMatrix<f64>,
    kept: Vec<usize>,
    dropped: Vec<usize>,
    sigma2: f64,
    m: usize,
}

impl SaddleOperators {
    /// `P^T P + sigma^2 omega (1+tau)^beta D^^(2p-1)`.
    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    /// Retained `sigma^2 omega ((1+tau)^beta - (1+tau-sigma_i)^beta)`.
    pub fn xi(&self) -> &DVector<f64> {
        &self.xi
    }

    /// Retained columns of `V` (equal to `U~` when `p = 1/2`).
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn kept_columns(&self) -> &[usize] {
        &self.kept
    }

    pub fn dropped_columns(&self) -> &[usize] {
        &self.dropped
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.theta.len()
    }

    /// `(Theta - B Xi B^T) v`, i.e. `sigma^2` times the posterior precision.
    pub fn system_matvec(&self, v: &DVector<f64>) -> DVector<f64> {
        let coeff = self.basis.tr_mul(v).component_mul(&self.xi);
        self.theta.component_mul(v) - &self.basis * coeff
    }
}

/// `sigma^2 omega ((1+tau)^beta - (1+tau-s)^beta)`.
pub fn xi_value(s: f64, hp: &HyperParameters) -> f64 {
    let base = 1.0 + hp.tau();
    hp.sigma().powi(2) * hp.omega() * (base.powf(hp.beta()) - (base - s).powf(hp.beta()))
}

/// Assembles `Theta` and `Xi`, dropping columns with `sigma_i > 1 + tau`
/// or negligible `|Xi_ii|`.
pub fn build_saddle(lrl: &LowRankLaplacian, hp: &HyperParameters, m: usize) -> Result<SaddleOperators> {
    let n = lrl.n();
    if m > n {
        return Err(Error::DimensionMismatch(format!("{m} observations for {n} points")));
    }
    let sigma2 = hp.sigma().powi(2);
    let base = 1.0 + hp.tau();
    let c = sigma2 * hp.omega() * base.powf(hp.beta());
    let e = 2.0 * lrl.p - 1.0;
    let theta = DVector::from_fn(n, |i, _| {
        let prior = if e == 0.0 { c } else { c * lrl.d_hat[i].powf(e) };
        prior + if i < m { 1.0 } else { 0.0 }
    });

    let candidates: Vec<(usize, f64)> = lrl
        .sigma
        .iter()
        .enumerate()
        .filter(|&(_, &s)| s <= base)
        .map(|(i, &s)| (i, xi_value(s, hp)))
        .collect();
    let largest = candidates.iter().map(|&(_, x)| x.abs()).fold(0.0, f64::max);
    let mut kept = Vec::new();
    let mut xi = Vec::new();
    for &(i, x) in &candidates {
        if x.abs() > XI_DROP_RTOL * largest {
            kept.push(i);
            xi.push(x);
        }
    }
    let dropped: Vec<usize> = (0..lrl.k()).filter(|i| !kept.contains(i)).collect();
    if !dropped.is_empty() {
        debug!("saddle: dropped {} of {} columns", dropped.len(), lrl.k());
    }
    let basis = lrl.v().select_columns(&kept);
    Ok(SaddleOperators {
        theta,
        xi: DVector::from_vec(xi),
        basis,
        kept,
        dropped,
        sigma2,
        m,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SaddleMethod {
    SymmetricSaddle,
    UnsymmetricSaddle,
    Woodbury,
}

impl SaddleMethod {
    /// Woodbury for up to 64 right-hand sides, MINRES above.
    pub fn default_for(columns: usize) -> Self {
        if columns <= 64 {
            SaddleMethod::Woodbury
        } else {
            SaddleMethod::SymmetricSaddle
        }
    }
}

fn iter_options(k: usize) -> IterOptions {
    IterOptions {
        tol: SADDLE_TOL,
        max_iter: 10 * (k + 1),
        restart: 2 * k + 2,
    }
}

/// Solves `(Theta - B Xi B^T) Phi = P^T Phi_hat` for the MAP displacements.
pub fn solve_map_saddle(
    ops: &SaddleOperators,
    phi_hat: &DMatrix<f64>,
    method: SaddleMethod,
) -> Result<DMatrix<f64>> {
    let (n, m) = (ops.n(), ops.m);
    if phi_hat.nrows() != m {
        return Err(Error::DimensionMismatch(format!(
            "phi_hat has {} rows, operators expect {m}",
            phi_hat.nrows()
        )));
    }
    let d = phi_hat.ncols();
    let mut rhs = DMatrix::zeros(n, d);
    rhs.rows_mut(0, m).copy_from(phi_hat);
    match method {
        SaddleMethod::Woodbury => {
            let cov = NystromCovariance::new(ops)?;
            Ok(cov.apply_inverse_system(&rhs))
        }
        SaddleMethod::SymmetricSaddle => solve_columns(&rhs, |b| symmetric_saddle(ops, b)),
        SaddleMethod::UnsymmetricSaddle => solve_columns(&rhs, |b| unsymmetric_saddle(ops, b)),
    }
}

fn solve_columns<F>(rhs: &DMatrix<f64>, f: F) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    let cols: Vec<DVector<f64>> = (0..rhs.ncols())
        .into_par_iter()
        .map(|j| f(&rhs.column(j).into_owned()))
        .collect::<Result<_>>()?;
    if cols.is_empty() {
        return Ok(DMatrix::zeros(rhs.nrows(), 0));
    }
    Ok(DMatrix::from_columns(&cols))
}

/// MINRES on `[[Theta, B], [B^T, Xi^-1]] [phi; y] = [b; 0]`.
fn symmetric_saddle(ops: &SaddleOperators, b: &DVector<f64>) -> Result<DVector<f64>> {
    let (n, k) = (ops.n(), ops.xi.len());
    let xi_inv = ops.xi.map(|x| 1.0 / x);
    let op = |z: &DVector<f64>| {
        let top = z.rows(0, n);
        let bot = z.rows(n, k);
        let mut out = DVector::zeros(n + k);
        let upper = ops.theta.component_mul(&top) + &ops.basis * bot;
        out.rows_mut(0, n).copy_from(&upper);
        let lower = ops.basis.tr_mul(&top) + xi_inv.component_mul(&bot);
        out.rows_mut(n, k).copy_from(&lower);
        out
    };
    let mut precond = DVector::zeros(n + k);
    precond.rows_mut(0, n).copy_from(&ops.theta.map(|t| 1.0 / t.abs()));
    precond.rows_mut(n, k).copy_from(&xi_inv.map(|x| 1.0 / x.abs()));
    let mut full_b = DVector::zeros(n + k);
    full_b.rows_mut(0, n).copy_from(b);
    let out = krylov::minres(op, &full_b, &precond, &iter_options(k))?;
    Ok(out.x.rows(0, n).into_owned())
}

/// GMRES on `[[Theta, B], [Xi B^T, I]] [phi; y] = [b; 0]`.
fn unsymmetric_saddle(ops: &SaddleOperators, b: &DVector<f64>) -> Result<DVector<f64>> {
    let (n, k) = (ops.n(), ops.xi.len());
    let op = |z: &DVector<f64>| {
        let top = z.rows(0, n);
        let bot = z.rows(n, k);
        let mut out = DVector::zeros(n + k);
        let upper = ops.theta.component_mul(&top) + &ops.basis * bot;
        out.rows_mut(0, n).copy_from(&upper);
        let lower = ops.basis.tr_mul(&top).component_mul(&ops.xi) + bot;
        out.rows_mut(n, k).copy_from(&lower);
        out
    };
    let mut precond = DVector::from_element(n + k, 1.0);
    precond.rows_mut(0, n).copy_from(&ops.theta.map(|t| 1.0 / t));
    let mut full_b = DVector::zeros(n + k);
    full_b.rows_mut(0, n).copy_from(b);
    let out = krylov::gmres(op, &full_b, &precond, &iter_options(k))?;
    Ok(out.x.rows(0, n).into_owned())
}

/// Posterior covariance `C = sigma^2 (Theta - B Xi B^T)^-1` in Woodbury form.
#[derive(Debug, Clone)]
pub struct NystromCovariance {
    theta: DVector<f64>,
    basis: DMatrix<f64>,
    xi: DVector<f64>,
    /// `Theta^-1 B`.
    tb: DMatrix<f64>,
    /// `(Xi^-1 - B^T Theta^-1 B)^-1`.
    core_inv: DMatrix<f64>,
    sigma2: f64,
}

impl NystromCovariance {
    /// Precomputes the `K x K` capacitance inverse in `O(N K^2)`.
    pub fn new(ops: &SaddleOperators) -> Result<Self> {
        let theta_inv = ops.theta.map(|t| 1.0 / t);
        let mut tb = ops.basis.clone();
        tb.par_column_iter_mut()
            .for_each(|mut col| col.component_mul_assign(&theta_inv));
        let k = ops.xi.len();
        let mut core = -ops.basis.tr_mul(&tb);
        for i in 0..k {
            core[(i, i)] += 1.0 / ops.xi[i];
        }
        crate::graph::symmetrize(&mut core);
        let core_inv = if k == 0 {
            DMatrix::zeros(0, 0)
        } else {
            let eig = SymmetricEigen::new(core);
            let big = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let small = eig.eigenvalues.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
            if !(small > 4.0 * f64::EPSILON * k as f64 * big) {
                return Err(Error::SingularCapacitance);
            }
            let mut scaled = eig.eigenvectors.clone();
            for (j, mut col) in scaled.column_iter_mut().enumerate() {
                col /= eig.eigenvalues[j];
            }
            let mut inv = scaled * eig.eigenvectors.transpose();
            crate::graph::symmetrize(&mut inv);
            inv
        };
        Ok(Self {
            theta: ops.theta.clone(),
            basis: ops.basis.clone(),
            xi: ops.xi.clone(),
            tb,
            core_inv,
            sigma2: ops.sigma2,
        })
    }

    pub fn n(&self) -> usize {
        self.theta.len()
    }

    /// `(Theta - B Xi B^T)^-1 X` for a block of columns.
    fn apply_inverse_system(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for mut col in out.column_iter_mut() {
            col.component_div_assign(&self.theta);
        }
        if self.xi.is_empty() {
            return out;
        }
        let proj = self.basis.tr_mul(&out);
        out + &self.tb * (&self.core_inv * proj)
    }

    /// `C v` in `O(N K)`.
    pub fn matvec(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.component_div(&self.theta);
        if !self.xi.is_empty() {
            let proj = self.basis.tr_mul(&out);
            out += &self.tb * (&self.core_inv * proj);
        }
        out * self.sigma2
    }

    /// `C^-1 v = (Theta v - B Xi B^T v) / sigma^2`.
    pub fn precision_matvec(&self, v: &DVector<f64>) -> DVector<f64> {
        let coeff = self.basis.tr_mul(v).component_mul(&self.xi);
        (self.theta.component_mul(v) - &self.basis * coeff) / self.sigma2
    }

    /// Exact `diag(C)` from the explicit Woodbury form.
    pub fn diag(&self) -> DVector<f64> {
        let n = self.n();
        if self.xi.is_empty() {
            return self.theta.map(|t| self.sigma2 / t);
        }
        let tc = &self.tb * &self.core_inv;
        let vals: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let corr = tc.row(i).dot(&self.tb.row(i));
                self.sigma2 * (1.0 / self.theta[i] + corr)
            })
            .collect();
        DVector::from_vec(vals)
    }
}
