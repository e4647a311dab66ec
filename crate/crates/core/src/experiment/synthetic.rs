//! Synthetic bi-fidelity problems with a known truth.
//!
//! Every generator returns `true_data` and a biased `lf_data`; the
//! high-fidelity oracle [`SyntheticProblem::hf`] adds `N(0, sigma^2)` noise to
//! the truth, drawn from a stream keyed by the row index so rows can be
//! requested lazily and in any order.

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorId {
    ClusteredShift,
    SmoothManifold,
    BeamLike1D,
}

/// Parameters of a synthetic problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct SyntheticSpec {
    pub generator: GeneratorId,
    pub n: usize,
    pub d: usize,
    /// Number of Gaussian clusters (clustered generator only).
    pub clusters: usize,
    /// Bias magnitude relative to the data scale.
    pub displacement: f64,
    /// High-fidelity noise std relative to the bias magnitude.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            generator: GeneratorId::ClusteredShift,
            n: 1000,
            d: 5,
            clusters: 10,
            displacement: 0.3,
            noise: 0.01,
            seed: 0,
        }
    }
}

/// Generated problem; `lf_data` is what the estimator sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProblem {
    pub generator_id: GeneratorId,
    pub true_data: DMatrix<f64>,
    pub lf_data: DMatrix<f64>,
    pub hf_noise_sigma: f64,
    pub cluster_labels: Option<Vec<usize>>,
    pub seed: u64,
}

/// Stream offset separating the oracle noise from the generator draws.
const HF_STREAM_BASE: u64 = 1 << 32;

impl SyntheticProblem {
    pub fn n(&self) -> usize {
        self.true_data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.true_data.ncols()
    }

    /// Noisy high-fidelity observation of point `i`.
    pub fn hf(&self, i: usize) -> RowDVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(HF_STREAM_BASE + i as u64);
        let mut row = self.true_data.row(i).into_owned();
        if self.hf_noise_sigma > 0.0 {
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += self.hf_noise_sigma * z;
            }
        }
        row
    }

    /// High-fidelity observations of the given points, in order.
    pub fn hf_rows(&self, indices: &[usize]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(indices.len(), self.dim());
        for (j, &i) in indices.iter().enumerate() {
            out.set_row(j, &self.hf(i));
        }
        out
    }
}

/// Builds the problem described by `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticProblem> {
    if spec.n < 2 || spec.d < 1 {
        return Err(Error::InvalidArgument(format!(
            "need N >= 2 and D >= 1, got {}x{}",
            spec.n, spec.d
        )));
    }
    let nonneg = |x: f64| x.is_finite() && x >= 0.0;
    if !nonneg(spec.displacement) || !nonneg(spec.noise) {
        return Err(Error::InvalidArgument(
            "displacement and noise must be finite and non-negative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (true_data, lf_data, bias_scale, labels) = match spec.generator {
        GeneratorId::ClusteredShift => clustered_shift(spec, &mut rng)?,
        GeneratorId::SmoothManifold => smooth_manifold(spec, &mut rng),
        GeneratorId::BeamLike1D => beam_like(spec, &mut rng)?,
    };
    Ok(SyntheticProblem {
        generator_id: spec.generator,
        true_data,
        lf_data,
        hf_noise_sigma: spec.noise * bias_scale,
        cluster_labels: labels,
        seed: spec.seed,
    })
}

type Generated = (DMatrix<f64>, DMatrix<f64>, f64, Option<Vec<usize>>);

fn mean_row_norm(x: &DMatrix<f64>) -> f64 {
    x.row_iter().map(|r| r.norm()).sum::<f64>() / x.nrows() as f64
}

fn random_unit(d: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    loop {
        let v = DVector::<f64>::from_fn(d, |_, _| StandardNormal.sample(rng));
        let nrm = v.norm();
        if nrm > 1e-8 {
            return v / nrm;
        }
    }
}

/// Minimum distance between cluster centers, in units of the cluster std.
const CENTER_SEPARATION: f64 = 8.0;

/// Unit-variance Gaussian clusters with centers at least
/// `CENTER_SEPARATION` apart; every cluster is shifted by its own constant
/// vector of norm `displacement * mean |lf row|`.
fn clustered_shift(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Generated> {
    let (n, d, g) = (spec.n, spec.d, spec.clusters);
    if g == 0 || g > n {
        return Err(Error::InvalidArgument(format!(
            "clusters must be in 1..={n}, got {g}"
        )));
    }
    let mut half = CENTER_SEPARATION * (g as f64).powf(1.0 / d as f64);
    let mut centers: Vec<DVector<f64>> = Vec::with_capacity(g);
    let mut failures = 0;
    while centers.len() < g {
        let c = DVector::from_fn(d, |_, _| rng.random_range(-half..half));
        if centers.iter().all(|o| (o - &c).norm() >= CENTER_SEPARATION) {
            centers.push(c);
        } else {
            failures += 1;
            if failures % 1000 == 0 {
                half *= 1.1;
            }
        }
    }
    let labels: Vec<usize> = (0..n).map(|i| i * g / n).collect();
    let mut lf = DMatrix::zeros(n, d);
    for (i, &c) in labels.iter().enumerate() {
        for k in 0..d {
            let z: f64 = StandardNormal.sample(rng);
            lf[(i, k)] = centers[c][k] + z;
        }
    }
    let scale = spec.displacement * mean_row_norm(&lf);
    let shifts: Vec<DVector<f64>> = (0..g).map(|_| random_unit(d, rng) * scale).collect();
    let mut truth = lf.clone();
    for (i, &c) in labels.iter().enumerate() {
        for k in 0..d {
            truth[(i, k)] += shifts[c][k];
        }
    }
    Ok((truth, lf, scale, Some(labels)))
}

/// Points on a closed curve `t -> (a_k cos(f_k t + c_k))`; the bias is a
/// smooth function of `t`.
fn smooth_manifold(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Generated {
    let (n, d) = (spec.n, spec.d);
    let tau = std::f64::consts::TAU;
    let freq: Vec<f64> = (0..d).map(|k| 1.0 + (k % 3) as f64).collect();
    let phase: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..tau)).collect();
    let amp: Vec<f64> = (0..d).map(|_| rng.random_range(1.0..2.0)).collect();
    let bias_dir = random_unit(d, rng);
    let mut t: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    t.sort_by(f64::total_cmp);
    let lf = DMatrix::from_fn(n, d, |i, k| amp[k] * (freq[k] * tau * t[i] + phase[k]).cos());
    let scale = spec.displacement * mean_row_norm(&lf);
    let mut truth = lf.clone();
    for i in 0..n {
        let s = (tau * t[i]).sin() + 0.5 * (2.0 * tau * t[i]).cos();
        for k in 0..d {
            truth[(i, k)] += scale * s * bias_dir[k];
        }
    }
    (truth, lf, scale, None)
}

/// Cantilever-like deflection fields on `D` grid points driven by a random
/// load and stiffness. The low-fidelity field is a smoothed, scaled-down
/// copy of the truth, so it underpredicts.
fn beam_like(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Generated> {
    let (n, d) = (spec.n, spec.d);
    if d < 3 {
        return Err(Error::InvalidArgument(format!(
            "beam fields need at least 3 grid points, got {d}"
        )));
    }
    let shape: Vec<f64> = (0..d)
        .map(|j| {
            let x = (j + 1) as f64 / d as f64;
            x * x * (3.0 - x) / 2.0
        })
        .collect();
    let bump: Vec<f64> = (0..d)
        .map(|j| (std::f64::consts::PI * (j + 1) as f64 / d as f64).sin())
        .collect();
    let mut truth = DMatrix::zeros(n, d);
    for i in 0..n {
        let load = rng.random_range(0.5..1.5);
        let stiffness = rng.random_range(0.8..1.2);
        let wobble = Normal::new(0.0, 0.05).expect("valid normal").sample(rng);
        for j in 0..d {
            truth[(i, j)] = load / stiffness * shape[j] + wobble * bump[j];
        }
    }
    let factor = 1.0 - spec.displacement;
    let mut lf = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let lo = truth[(i, j.saturating_sub(1))];
            let hi = truth[(i, (j + 1).min(d - 1))];
            lf[(i, j)] = factor * (lo + 2.0 * truth[(i, j)] + hi) / 4.0;
        }
    }
    let bias = &truth - &lf;
    let scale = mean_row_norm(&bias);
    Ok((truth, lf, scale, None))
}
