use std::sync::Arc;

use mfgl_core::experiment::{generate, run_pipeline, GeneratorId, PipelineConfig, SolverKind, SyntheticSpec};
use mfgl_core::graph::build_graph;
use mfgl_core::posterior::{PosteriorSolver, TruncatedSolver};
use mfgl_core::spectral::{low_spectrum, EigenOptions};
use mfgl_core::*;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn points(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

fn lap(n: usize, d: usize, p: f64, q: f64, seed: u64) -> (Arc<AffinityGraph>, GraphLaplacian) {
    let g = Arc::new(build_graph(&points(n, d, seed), 7).unwrap());
    let l = laplacian(&g, p, q).unwrap();
    (g, l)
}

#[test]
fn truncated_with_full_basis_equals_dense() {
    let (_, l) = lap(48, 4, 0.5, 0.5, 1);
    let phi_hat = points(8, 3, 2);
    let hp = HyperParameters::with_defaults(0.1, 2.0, 0.3).unwrap();
    let dense = dense_posterior(&l, &phi_hat, &hp, true).unwrap();
    let spec = Arc::new(low_spectrum(&l, 48, &EigenOptions::default()).unwrap());
    let tr = TruncatedSolver::new(spec).solve(&phi_hat, &hp).unwrap();
    assert!(rel(&tr.phi_star, &dense.phi_star) < 1e-8);
    let dv = dense.stddevs.map(|s| s * s);
    let tv = tr.stddevs.map(|s| s * s);
    assert!((&tv - &dv).norm() / dv.norm() < 1e-8);
}

#[test]
fn nystrom_full_landmarks_equals_dense_for_both_normalizations() {
    for (p, q) in [(0.5, 0.5), (1.0, 0.0), (0.25, 0.75)] {
        let n = 60;
        let (g, l) = lap(n, 3, p, q, 3);
        let phi_hat = points(6, 2, 4);
        let hp = HyperParameters::with_defaults(0.2, 1.5, 0.4).unwrap();
        let dense = dense_posterior(&l, &phi_hat, &hp, false).unwrap();
        let all: Vec<usize> = (0..n).collect();
        let f = Arc::new(nystrom_general_p(g.as_ref(), &all, p, &NystromOptions::default()).unwrap());
        for method in [SaddleMethod::Woodbury, SaddleMethod::SymmetricSaddle, SaddleMethod::UnsymmetricSaddle] {
            let ny = NystromSolver::new(Arc::clone(&f), Some(method)).solve(&phi_hat, &hp).unwrap();
            let e = rel(&ny.phi_star, &dense.phi_star);
            assert!(e < 1e-6, "(p, q) = ({p}, {q}) {method:?}: {e:e}");
            let sd = (&ny.stddevs - &dense.stddevs).norm() / dense.stddevs.norm();
            assert!(sd < 1e-6, "stddevs {sd:e}");
        }
    }
}

#[test]
fn nystrom_routes_agree_on_partial_landmarks() {
    // exactly low-rank weights so the extension is exact away from the diagonal
    let n = 200;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = DMatrix::from_fn(n, 4, |_, _| rng.random_range(0.2..1.0));
    let w = &f * f.transpose();
    let weights = graph::DenseWeights(w);
    let landmarks = select_landmarks(n, 10, 30, 6).unwrap();
    let factors = Arc::new(nystrom_factor(&weights, &landmarks, &NystromOptions::default()).unwrap());
    let phi_hat = points(10, 3, 7);
    let hp = HyperParameters::with_defaults(0.05, 3.0, 0.2).unwrap();
    let sols: Vec<DMatrix<f64>> = [SaddleMethod::Woodbury, SaddleMethod::SymmetricSaddle, SaddleMethod::UnsymmetricSaddle]
        .into_iter()
        .map(|m| NystromSolver::new(Arc::clone(&factors), Some(m)).solve(&phi_hat, &hp).unwrap().phi_star)
        .collect();
    assert!(rel(&sols[1], &sols[0]) < 1e-8);
    assert!(rel(&sols[2], &sols[0]) < 1e-8);
}

#[test]
fn pipelines_agree_across_solvers_at_full_rank() {
    let problem = generate(&SyntheticSpec {
        generator: GeneratorId::ClusteredShift,
        n: 150,
        d: 3,
        clusters: 5,
        seed: 11,
        ..Default::default()
    })
    .unwrap();
    let base = PipelineConfig {
        m: 5,
        k: Some(150),
        ..Default::default()
    };
    let means: Vec<f64> = [SolverKind::Dense, SolverKind::Truncated, SolverKind::Nystrom]
        .into_iter()
        .map(|solver| {
            let cfg = PipelineConfig { solver, ..base.clone() };
            run_pipeline(&problem, &cfg).unwrap().report.mean_mf
        })
        .collect();
    assert!((means[1] - means[0]).abs() <= 1e-6 * means[0], "{means:?}");
    assert!((means[2] - means[0]).abs() <= 1e-6 * means[0], "{means:?}");
}

#[test]
fn truncated_mean_approaches_dense_as_k_grows() {
    let (_, l) = lap(80, 3, 0.5, 0.5, 8);
    let phi_hat = points(6, 2, 9);
    let hp = HyperParameters::with_defaults(0.1, 1.0, 0.2).unwrap();
    let dense = dense_posterior(&l, &phi_hat, &hp, false).unwrap();
    let full = Arc::new(low_spectrum(&l, 80, &EigenOptions::default()).unwrap());
    let mut prev = f64::INFINITY;
    for k in [10, 20, 40, 80] {
        let s = Arc::new(full.truncated(k).unwrap());
        let e = rel(&TruncatedSolver::new(s).solve(&phi_hat, &hp).unwrap().phi_star, &dense.phi_star);
        assert!(e <= prev * (1.0 + 1e-9) + 1e-12, "K = {k}: {e:e} after {prev:e}");
        prev = e;
    }
    assert!(prev < 1e-8);
}
