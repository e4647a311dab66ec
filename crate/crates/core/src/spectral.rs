//! Low-lying spectrum of the graph Laplacian and the posterior restricted to
//! the span of the first `K` eigenvectors.
//!
//! The smallest eigenpairs of `L` are obtained as the largest eigenpairs of
//! the PSD matrix `a I - L_sym`, where `a = 2 max_i D_ii^(1-p-q)` bounds the
//! spectrum and `L_sym` is the symmetric Laplacian similar to `L`. For
//! `p != q` the eigenvectors are mapped back with `D^-(p-q)/2`, which makes
//! them orthonormal under `<u, v> = u^T D^(p-q) v`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::data::HyperParameters;
use crate::error::{Error, Result};
use crate::graph::GraphLaplacian;
use crate::linalg::{self, KrylovOptions};

/// Residual above which an eigenpair is reported as unconverged.
pub const EIGEN_RESIDUAL_LIMIT: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct EigenOptions {
    /// Dense eigensolver up to this N, block Krylov above.
    pub dense_threshold: usize,
    pub krylov: KrylovOptions,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            dense_threshold: 2_000,
            krylov: KrylovOptions::default(),
        }
    }
}

/// The `K` smallest eigenpairs of `L`, ascending.
#[derive(Debug, Clone)]
pub struct Spectrum {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    shift_a: f64,
    p: f64,
    q: f64,
    degrees: DVector<f64>,
}

impl Spectrum {
    /// Assembles a spectrum from precomputed pairs; `weights` are the degrees
    /// that define the inner product the eigenvectors are orthonormal in.
    pub fn from_parts(
        eigenvalues: DVector<f64>,
        eigenvectors: DMatrix<f64>,
        shift_a: f64,
        p: f64,
        q: f64,
        degrees: DVector<f64>,
    ) -> Result<Self> {
        if eigenvectors.ncols() != eigenvalues.len() || eigenvectors.nrows() != degrees.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} eigenvalues, eigenvectors {:?}, {} degrees",
                eigenvalues.len(),
                eigenvectors.shape(),
                degrees.len()
            )));
        }
        Ok(Self {
            eigenvalues,
            eigenvectors,
            shift_a,
            p,
            q,
            degrees,
        })
    }

    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn n(&self) -> usize {
        self.eigenvectors.nrows()
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn shift_a(&self) -> f64 {
        self.shift_a
    }

    pub fn pq(&self) -> (f64, f64) {
        (self.p, self.q)
    }

    pub fn degrees(&self) -> &DVector<f64> {
        &self.degrees
    }

    /// Keeps only the first `k` pairs.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k > self.k() {
            return Err(Error::InsufficientSpectrum {
                available: self.k(),
                required: k,
            });
        }
        Ok(Self {
            eigenvalues: self.eigenvalues.rows(0, k).into_owned(),
            eigenvectors: self.eigenvectors.columns(0, k).into_owned(),
            ..self.clone()
        })
    }
}

/// Computes the `k` smallest eigenpairs of `L`.
pub fn low_spectrum(l: &GraphLaplacian, k: usize, opts: &EigenOptions) -> Result<Spectrum> {
    let n = l.n();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("K must be in 1..={n}, got {k}")));
    }
    let a = l.spectral_bound();
    let sym = l.symmetric_form();
    let mut shifted = -&sym;
    for i in 0..n {
        shifted[(i, i)] += a;
    }

    let (top, mut vecs) = if n <= opts.dense_threshold {
        let (vals, vecs) = linalg::sym_eigen_desc(&shifted);
        (vals.rows(0, k).into_owned(), vecs.columns(0, k).into_owned())
    } else {
        let (vals, vecs, _) = linalg::top_eigenpairs_krylov(&shifted, k, &opts.krylov);
        if vals.len() < k {
            return Err(Error::ConvergenceFailure {
                k: vals.len(),
                residual: f64::INFINITY,
            });
        }
        (vals, vecs)
    };
    linalg::canonical_signs(&mut vecs);
    let eigenvalues = top.map(|t| a - t);

    let resid = &sym * &vecs - &vecs * DMatrix::from_diagonal(&eigenvalues);
    for (j, col) in resid.column_iter().enumerate() {
        let r = col.norm();
        if !(r <= EIGEN_RESIDUAL_LIMIT) {
            return Err(Error::ConvergenceFailure { k: j, residual: r });
        }
    }

    let (p, q) = (l.p(), l.q());
    if p != q {
        let h = 0.5 * (p - q);
        let scale = l.degrees().map(|d| d.powf(-h));
        for mut col in vecs.column_iter_mut() {
            col.component_mul_assign(&scale);
        }
    }
    Spectrum::from_parts(eigenvalues, vecs, a, p, q, l.degrees().clone())
}

/// Largest eigenvalue of `L`, to a relative accuracy of about `1e-6`.
pub fn largest_eigenvalue(l: &GraphLaplacian) -> f64 {
    let sym = l.symmetric_form();
    if l.n() <= 300 {
        return linalg::sym_eigen_desc(&sym).0[0];
    }
    let opts = KrylovOptions {
        tol: 1e-6 * l.spectral_bound(),
        ..KrylovOptions::default()
    };
    linalg::top_eigenpairs_krylov(&sym, 1, &opts).0[0]
}

/// Spectral coordinates: row `i` holds entry `i` of the first `m` eigenvectors.
pub fn embed(spectrum: &Spectrum, m: usize) -> Result<DMatrix<f64>> {
    if m > spectrum.k() {
        return Err(Error::InsufficientSpectrum {
            available: spectrum.k(),
            required: m,
        });
    }
    Ok(spectrum.eigenvectors.columns(0, m).into_owned())
}

/// `(lambda + tau)^beta` with round-off negatives clipped to zero.
pub(crate) fn shifted_power(lambda: f64, tau: f64, beta: f64) -> f64 {
    (lambda.max(0.0) + tau).powf(beta)
}

/// Gaussian posterior over the coefficients of the truncated eigenbasis.
#[derive(Debug, Clone)]
pub struct TruncatedPosterior {
    coeff_mean: DMatrix<f64>,
    coeff_cov: DMatrix<f64>,
    spectrum: Arc<Spectrum>,
}

impl TruncatedPosterior {
    /// `K x D` posterior mean of the coefficients.
    pub fn coeff_mean(&self) -> &DMatrix<f64> {
        &self.coeff_mean
    }

    /// `K x K` coefficient covariance.
    pub fn coeff_cov(&self) -> &DMatrix<f64> {
        &self.coeff_cov
    }

    pub fn spectrum(&self) -> &Arc<Spectrum> {
        &self.spectrum
    }

    /// MAP displacements `Psi_K A*_K`.
    pub fn phi_star(&self) -> DMatrix<f64> {
        self.spectrum.eigenvectors() * &self.coeff_mean
    }
}

/// Solves for the coefficient posterior given the observed displacements of
/// the leading `M = phi_hat.nrows()` points.
pub fn truncated_posterior(
    spectrum: &Arc<Spectrum>,
    phi_hat: &DMatrix<f64>,
    hp: &HyperParameters,
) -> Result<TruncatedPosterior> {
    let m = phi_hat.nrows();
    if m > spectrum.n() {
        return Err(Error::DimensionMismatch(format!(
            "{m} observations for {} points",
            spectrum.n()
        )));
    }
    let coeff_cov = coefficient_covariance(spectrum, m, hp)?;
    let observed = spectrum.eigenvectors().rows(0, m);
    let rhs = observed.transpose() * phi_hat / hp.sigma().powi(2);
    let coeff_mean = &coeff_cov * rhs;
    Ok(TruncatedPosterior {
        coeff_mean,
        coeff_cov,
        spectrum: Arc::clone(spectrum),
    })
}

/// `(P Psi_K)^T (P Psi_K) / sigma^2 + omega (Lambda_K + tau)^beta`.
fn coefficient_precision(spectrum: &Spectrum, m: usize, hp: &HyperParameters) -> DMatrix<f64> {
    let observed = spectrum.eigenvectors().rows(0, m);
    let mut precision = observed.transpose() * observed / hp.sigma().powi(2);
    crate::graph::symmetrize(&mut precision);
    for (k, &lam) in spectrum.eigenvalues().iter().enumerate() {
        precision[(k, k)] += hp.omega() * shifted_power(lam, hp.tau(), hp.beta());
    }
    precision
}

/// Inverse of the coefficient precision. The precision is Jacobi-scaled
/// first: its diagonal spans many decades when weakly connected clusters
/// carry near-zero eigenvalues, and the scaled matrix stays well conditioned.
fn coefficient_covariance(
    spectrum: &Spectrum,
    m: usize,
    hp: &HyperParameters,
) -> Result<DMatrix<f64>> {
    let mut precision = coefficient_precision(spectrum, m, hp);
    let scale = precision.diagonal().map(|v| 1.0 / v.sqrt());
    if !scale.iter().all(|s| s.is_finite()) {
        return Err(Error::SingularSystem);
    }
    let k = precision.nrows();
    for j in 0..k {
        for i in 0..k {
            precision[(i, j)] *= scale[i] * scale[j];
        }
    }
    let chol = precision.cholesky().ok_or(Error::SingularSystem)?;
    let mut cov = chol.inverse();
    for j in 0..k {
        for i in 0..k {
            cov[(i, j)] *= scale[i] * scale[j];
        }
    }
    crate::graph::symmetrize(&mut cov);
    Ok(cov)
}

/// `diag(Psi_K C_A Psi_K^T)` in `O(N K^2)`.
pub fn truncated_variances(tp: &TruncatedPosterior) -> DVector<f64> {
    let psi = tp.spectrum.eigenvectors();
    let pc = psi * &tp.coeff_cov;
    DVector::from_iterator(
        psi.nrows(),
        (0..psi.nrows()).map(|i| pc.row(i).dot(&psi.row(i))),
    )
}

/// Only the variances, skipping the mean solve.
pub(crate) fn truncated_variances_for(
    spectrum: &Arc<Spectrum>,
    m: usize,
    hp: &HyperParameters,
) -> Result<DVector<f64>> {
    let cov = coefficient_covariance(spectrum, m, hp)?;
    let tp = TruncatedPosterior {
        coeff_mean: DMatrix::zeros(spectrum.k(), 0),
        coeff_cov: cov,
        spectrum: Arc::clone(spectrum),
    };
    Ok(truncated_variances(&tp))
}
