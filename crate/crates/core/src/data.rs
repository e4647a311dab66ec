//! Datasets, normalization and hyperparameters shared by every solver.
//!
//! Row `i` of every N-row matrix corresponds to data point `i`. When
//! high-fidelity data is attached it always covers the *leading* `M` rows,
//! so selecting observed rows is a slice rather than a gather.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SCALE_FLOOR: f64 = 1e-14;

/// Low-fidelity points plus optional high-fidelity points for the first `M` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    lf: DMatrix<f64>,
    hf: Option<DMatrix<f64>>,
    param_ids: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(
        lf: DMatrix<f64>,
        hf: Option<DMatrix<f64>>,
        param_ids: Option<Vec<String>>,
    ) -> Result<Self> {
        let (n, d) = lf.shape();
        if n < 2 || d < 1 {
            return Err(Error::InvalidArgument(format!(
                "dataset needs N >= 2 and D >= 1, got {n}x{d}"
            )));
        }
        if !all_finite(&lf) {
            return Err(Error::NonFiniteInput);
        }
        if let Some(h) = &hf {
            if h.ncols() != d || h.nrows() > n {
                return Err(Error::DimensionMismatch(format!(
                    "hf is {}x{}, lf is {n}x{d}",
                    h.nrows(),
                    h.ncols()
                )));
            }
            if !all_finite(h) {
                return Err(Error::NonFiniteInput);
            }
        }
        if let Some(ids) = &param_ids {
            if ids.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "{} parameter ids for {n} rows",
                    ids.len()
                )));
            }
        }
        Ok(Self { lf, hf, param_ids })
    }

    pub fn from_lf(lf: DMatrix<f64>) -> Result<Self> {
        Self::new(lf, None, None)
    }

    pub fn lf(&self) -> &DMatrix<f64> {
        &self.lf
    }

    pub fn hf(&self) -> Option<&DMatrix<f64>> {
        self.hf.as_ref()
    }

    pub fn param_ids(&self) -> Option<&[String]> {
        self.param_ids.as_deref()
    }

    pub fn n(&self) -> usize {
        self.lf.nrows()
    }

    pub fn dim(&self) -> usize {
        self.lf.ncols()
    }

    /// Number of high-fidelity rows (0 when absent).
    pub fn m(&self) -> usize {
        self.hf.as_ref().map_or(0, |h| h.nrows())
    }

    /// Returns a copy with `hf` attached to the leading rows.
    pub fn with_hf(&self, hf: DMatrix<f64>) -> Result<Self> {
        Self::new(self.lf.clone(), Some(hf), self.param_ids.clone())
    }
}

/// How data points are rescaled before building the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationMode {
    /// Zero mean and unit (population) standard deviation per component.
    PerComponentStandardize,
    /// Divide each instance by the Euclidean norm of its low-fidelity row.
    PerInstanceUnitNorm,
    #[default]
    None,
}

/// Statistics needed to apply or undo a normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub mode: NormalizationMode,
    /// Per-component means (standardize mode).
    pub mean: Vec<f64>,
    /// Per-component population standard deviations (standardize mode).
    pub std: Vec<f64>,
    /// Per-instance scale factors (unit-norm mode).
    pub scales: Vec<f64>,
}

impl NormalizationSpec {
    pub fn identity() -> Self {
        Self {
            mode: NormalizationMode::None,
            mean: Vec::new(),
            std: Vec::new(),
            scales: Vec::new(),
        }
    }

    /// Normalizes rows of `x`, where row `i` belongs to instance `i`.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.map_rows(x, false)
    }

    /// Inverse of [`apply`](Self::apply).
    pub fn invert(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.map_rows(x, true)
    }

    fn map_rows(&self, x: &DMatrix<f64>, inverse: bool) -> Result<DMatrix<f64>> {
        let mut out = x.clone();
        match self.mode {
            NormalizationMode::None => {}
            NormalizationMode::PerComponentStandardize => {
                if x.ncols() != self.mean.len() {
                    return Err(Error::DimensionMismatch(format!(
                        "{} columns, normalization has {}",
                        x.ncols(),
                        self.mean.len()
                    )));
                }
                for (k, mut col) in out.column_iter_mut().enumerate() {
                    let (mu, sd) = (self.mean[k], self.std[k]);
                    for v in col.iter_mut() {
                        *v = if inverse { *v * sd + mu } else { (*v - mu) / sd };
                    }
                }
            }
            NormalizationMode::PerInstanceUnitNorm => {
                if x.nrows() > self.scales.len() {
                    return Err(Error::DimensionMismatch(format!(
                        "{} rows, normalization covers {}",
                        x.nrows(),
                        self.scales.len()
                    )));
                }
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    let s = self.scales[i];
                    if inverse {
                        row *= s;
                    } else {
                        row /= s;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Reorders per-instance statistics so that new row `j` uses old row `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        if self.mode == NormalizationMode::PerInstanceUnitNorm {
            out.scales = perm.iter().map(|&i| self.scales[i]).collect();
        }
        out
    }
}

/// Normalizes the low-fidelity rows and, if present, the high-fidelity rows
/// with the statistics of their low-fidelity counterparts.
pub fn normalize(data: &Dataset, mode: NormalizationMode) -> Result<(Dataset, NormalizationSpec)> {
    let lf = data.lf();
    let (n, d) = lf.shape();
    let spec = match mode {
        NormalizationMode::None => NormalizationSpec::identity(),
        NormalizationMode::PerComponentStandardize => {
            let mut mean = Vec::with_capacity(d);
            let mut std = Vec::with_capacity(d);
            for (k, col) in lf.column_iter().enumerate() {
                let mu = col.sum() / n as f64;
                let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                let sd = var.sqrt();
                if sd < SCALE_FLOOR {
                    return Err(Error::ZeroVariance { component: k });
                }
                mean.push(mu);
                std.push(sd);
            }
            NormalizationSpec {
                mode,
                mean,
                std,
                scales: Vec::new(),
            }
        }
        NormalizationMode::PerInstanceUnitNorm => {
            let mut scales = Vec::with_capacity(n);
            for (i, row) in lf.row_iter().enumerate() {
                let s = row.norm();
                if s < SCALE_FLOOR {
                    return Err(Error::ZeroNorm { instance: i });
                }
                scales.push(s);
            }
            NormalizationSpec {
                mode,
                mean: Vec::new(),
                std: Vec::new(),
                scales,
            }
        }
    };
    let lf_n = spec.apply(lf)?;
    let hf_n = data.hf().map(|h| spec.apply(h)).transpose()?;
    let out = Dataset::new(lf_n, hf_n, data.param_ids.clone())?;
    Ok((out, spec))
}

/// Hyperparameters of the prior and likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParameters {
    sigma: f64,
    omega: f64,
    tau: f64,
    beta: f64,
    r: f64,
}

impl HyperParameters {
    pub const DEFAULT_BETA: f64 = 2.0;
    pub const DEFAULT_R: f64 = 3.0;

    pub fn new(sigma: f64, omega: f64, tau: f64, beta: f64, r: f64) -> Result<Self> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if !ok(sigma) || !ok(omega) || !ok(tau) {
            return Err(Error::InvalidArgument(format!(
                "sigma, omega and tau must be positive (got {sigma}, {omega}, {tau})"
            )));
        }
        if !(beta.is_finite() && beta >= 1.0) {
            return Err(Error::InvalidArgument(format!("beta must be >= 1, got {beta}")));
        }
        if !(r.is_finite() && r > 1.0) {
            return Err(Error::InvalidArgument(format!("r must be > 1, got {r}")));
        }
        Ok(Self {
            sigma,
            omega,
            tau,
            beta,
            r,
        })
    }

    /// `beta = 2`, `r = 3`.
    pub fn with_defaults(sigma: f64, omega: f64, tau: f64) -> Result<Self> {
        Self::new(sigma, omega, tau, Self::DEFAULT_BETA, Self::DEFAULT_R)
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
    pub fn omega(&self) -> f64 {
        self.omega
    }
    pub fn tau(&self) -> f64 {
        self.tau
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn r(&self) -> f64 {
        self.r
    }

    /// Prior strength independent of `tau` and `beta`: `omega * tau^beta`.
    pub fn kappa(&self) -> f64 {
        self.omega * self.tau.powf(self.beta)
    }

    pub fn with_omega(&self, omega: f64) -> Result<Self> {
        Self::new(self.sigma, omega, self.tau, self.beta, self.r)
    }

    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        Self::new(self.sigma, self.omega, tau, self.beta, self.r)
    }

    pub fn with_sigma(&self, sigma: f64) -> Result<Self> {
        Self::new(sigma, self.omega, self.tau, self.beta, self.r)
    }
}

/// Observed and estimated low-to-high fidelity displacements.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementMatrices {
    /// M x D, `hf - lf` on the observed rows.
    pub phi_hat: DMatrix<f64>,
    /// N x D MAP displacements, filled in by a solver.
    pub phi_star: Option<DMatrix<f64>>,
}

/// Observed displacements `hf[i] - lf[i]` for the leading `M` rows.
pub fn displacements(data: &Dataset) -> Result<DisplacementMatrices> {
    let hf = data.hf().ok_or(Error::MissingHighFidelity)?;
    let m = hf.nrows();
    let phi_hat = hf - data.lf().rows(0, m);
    Ok(DisplacementMatrices {
        phi_hat,
        phi_star: None,
    })
}

/// Gathers rows: output row `j` is input row `perm[j]`.
pub fn gather_rows(x: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(perm.len(), x.ncols(), |j, k| x[(perm[j], k)])
}

pub fn gather_vec(x: &DVector<f64>, perm: &[usize]) -> DVector<f64> {
    DVector::from_iterator(perm.len(), perm.iter().map(|&i| x[i]))
}

/// Inverse of a permutation given as a gather list.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &i) in perm.iter().enumerate() {
        inv[i] = j;
    }
    inv
}

pub(crate) fn all_finite(x: &DMatrix<f64>) -> bool {
    x.iter().all(|v| v.is_finite())
}
