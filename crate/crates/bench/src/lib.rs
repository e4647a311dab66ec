//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use mfgl_core::graph::{build_graph, SelfTuningKernel};
use mfgl_core::{laplacian, AffinityGraph, GraphLaplacian, HyperParameters};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform points in `[-1, 1]^d`.
pub fn points(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
}

/// Symmetric-normalized Laplacian of a random point cloud.
pub fn symmetric_laplacian(n: usize, d: usize, seed: u64) -> (Arc<AffinityGraph>, GraphLaplacian) {
    let g = Arc::new(build_graph(&points(n, d, seed), 7).expect("graph"));
    let l = laplacian(&g, 0.5, 0.5).expect("laplacian");
    (g, l)
}

/// On-demand kernel whose width grows with `n`, so partial landmarks cover it.
pub fn wide_kernel(n: usize, d: usize, seed: u64) -> SelfTuningKernel {
    SelfTuningKernel::new(&points(n, d, seed), (n / 20).max(1)).expect("kernel")
}

/// Observations for the first `m` points.
pub fn observations(m: usize, d: usize, seed: u64) -> DMatrix<f64> {
    points(m, d, seed ^ 0x5eed)
}

pub fn hyperparameters() -> HyperParameters {
    HyperParameters::with_defaults(0.05, 1.0, 1e-2).expect("valid hyperparameters")
}
