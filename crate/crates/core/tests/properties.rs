use std::sync::Arc;

use mfgl_core::experiment::{ErrorMetric, ErrorReport};
use mfgl_core::graph::build_graph;
use mfgl_core::posterior::{prior_precision, DenseSolver, PosteriorSolver};
use mfgl_core::*;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(r: usize, c: usize, seed: u64, lo: f64, hi: f64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(r, c, |_, _| rng.random_range(lo..hi))
}

fn graph(n: usize, d: usize, seed: u64) -> Arc<AffinityGraph> {
    Arc::new(build_graph(&random(n, d, seed, -1.0, 1.0), 7.min(n - 1)).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn normalization_round_trips(n in 2usize..30, d in 1usize..6, seed in any::<u64>()) {
        let lf = random(n, d, seed, 0.5, 3.0);
        let hf = random(n.min(3), d, seed ^ 1, 0.5, 3.0);
        let data = Dataset::new(lf.clone(), Some(hf.clone()), None).unwrap();
        for mode in [NormalizationMode::None, NormalizationMode::PerComponentStandardize, NormalizationMode::PerInstanceUnitNorm] {
            let Ok((normed, spec)) = normalize(&data, mode) else { continue };
            let back = spec.invert(normed.lf()).unwrap();
            prop_assert!((&back - &lf).norm() <= 1e-12 * lf.norm());
            let back_hf = spec.invert(normed.hf().unwrap()).unwrap();
            prop_assert!((&back_hf - &hf).norm() <= 1e-12 * hf.norm());
        }
    }

    #[test]
    fn standardizing_twice_is_stable(n in 3usize..30, d in 1usize..5, seed in any::<u64>()) {
        let data = Dataset::from_lf(random(n, d, seed, -5.0, 5.0)).unwrap();
        let (once, _) = normalize(&data, NormalizationMode::PerComponentStandardize).unwrap();
        let (_, spec) = normalize(&once, NormalizationMode::PerComponentStandardize).unwrap();
        for k in 0..d {
            prop_assert!(spec.mean[k].abs() < 1e-12);
            prop_assert!((spec.std[k] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_laplacian_spectrum(n in 8usize..40, d in 1usize..5, seed in any::<u64>(), p in 0.0f64..1.0) {
        let g = graph(n, d, seed);
        let l = laplacian(&g, p, p).unwrap();
        let eig = SymmetricEigen::new(l.matrix().clone());
        let a = l.spectral_bound();
        for &v in eig.eigenvalues.iter() {
            prop_assert!(v >= -1e-10 && v <= a + 1e-10, "{v} outside [0, {a}]");
        }
        let dq = g.degrees().map(|x| x.powf(p));
        prop_assert!((l.matrix() * dq).amax() < 1e-10);
    }

    #[test]
    fn laplacian_is_self_adjoint_in_weighted_inner(n in 8usize..30, seed in any::<u64>(), p in 0.0f64..1.5, q in 0.0f64..1.5) {
        let g = graph(n, 3, seed);
        let l = laplacian(&g, p, q).unwrap();
        prop_assert!(l.self_adjointness_check(3, seed).unwrap() < 1e-10);
    }

    #[test]
    fn columns_decouple(seed in any::<u64>()) {
        let l = laplacian(&graph(30, 3, seed), 0.5, 0.5).unwrap();
        let phi_hat = random(5, 3, seed ^ 7, -1.0, 1.0);
        let hp = HyperParameters::with_defaults(0.2, 1.3, 0.3).unwrap();
        let joint = dense_posterior(&l, &phi_hat, &hp, false).unwrap().phi_star;
        for k in 0..3 {
            let col = DMatrix::from_column_slice(5, 1, phi_hat.column(k).as_slice());
            let single = dense_posterior(&l, &col, &hp, false).unwrap().phi_star;
            prop_assert!((single.column(0) - joint.column(k)).amax() <= 1e-14 * joint.amax().max(1.0));
        }
    }

    #[test]
    fn covariance_ignores_observations(seed in any::<u64>()) {
        let l = laplacian(&graph(25, 2, seed), 0.5, 0.5).unwrap();
        let hp = HyperParameters::with_defaults(0.3, 0.7, 0.5).unwrap();
        let a = dense_posterior(&l, &random(4, 2, seed ^ 1, -1.0, 1.0), &hp, true).unwrap();
        let b = dense_posterior(&l, &random(4, 2, seed ^ 2, -9.0, 9.0), &hp, true).unwrap();
        prop_assert_eq!(a.covariance.unwrap(), b.covariance.unwrap());
    }

    #[test]
    fn map_is_the_objective_minimizer(seed in any::<u64>()) {
        let n = 25;
        let m = 4;
        let l = laplacian(&graph(n, 3, seed), 0.5, 0.5).unwrap();
        let hp = HyperParameters::with_defaults(0.4, 0.9, 0.3).unwrap();
        let phi_hat = random(m, 2, seed ^ 3, -1.0, 1.0);
        let x = dense_posterior(&l, &phi_hat, &hp, false).unwrap().phi_star;
        let g = prior_precision(&l, hp.tau(), hp.beta());
        let objective = |t: &DMatrix<f64>| {
            let misfit = t.rows(0, m) - &phi_hat;
            misfit.norm_squared() / (2.0 * hp.sigma().powi(2)) + 0.5 * hp.omega() * (t.transpose() * &g * t).trace()
        };
        let mut grad = &g * &x * hp.omega();
        let misfit = (x.rows(0, m) - &phi_hat) / hp.sigma().powi(2);
        let mut head = grad.rows_mut(0, m);
        head += &misfit;
        prop_assert!(grad.amax() < 1e-9 * (1.0 + phi_hat.amax() / hp.sigma().powi(2)));
        let f0 = objective(&x);
        for t in 0..5 {
            let dir = random(n, 2, seed ^ (100 + t), -1.0, 1.0) * 1e-3;
            prop_assert!(objective(&(&x + dir)) >= f0);
        }
    }

    #[test]
    fn mean_stddev_decreases_with_omega(seed in any::<u64>()) {
        let l = laplacian(&graph(30, 2, seed), 0.5, 0.5).unwrap();
        let solver = DenseSolver::new(l, false).unwrap();
        let mut prev = f64::INFINITY;
        for e in -3..=3 {
            let hp = HyperParameters::with_defaults(0.1, 10f64.powi(e), 0.2).unwrap();
            let s = solver.stddevs(5, &hp).unwrap();
            let mean = s.rows(5, 25).mean();
            prop_assert!(mean < prev);
            prev = mean;
        }
    }

    #[test]
    fn plans_are_valid_permutations(n in 12usize..60, m in 1usize..6, seed in any::<u64>()) {
        let l = laplacian(&graph(n, 2, seed), 0.5, 0.5).unwrap();
        let s = low_spectrum(&l, m, &EigenOptions::default()).unwrap();
        let plan = plan_acquisition(&s, m, seed, None).unwrap();
        let mut sorted = plan.permutation.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(&plan.permutation[..m], &plan.selected_indices[..]);
        let again = plan_acquisition(&s, m, seed, None).unwrap();
        prop_assert_eq!(plan, again);
    }

    #[test]
    fn report_reduction_is_consistent(seed in any::<u64>()) {
        let reference = random(10, 3, seed, 1.0, 2.0);
        let lf = &reference + random(10, 3, seed ^ 1, -0.5, 0.5);
        let mf = &reference + random(10, 3, seed ^ 2, -0.1, 0.1);
        for metric in [ErrorMetric::FieldRelL2, ErrorMetric::ComponentRelAbs] {
            let r = ErrorReport::compute(&lf, &mf, &reference, metric).unwrap();
            prop_assert!((r.reduction - 100.0 * (1.0 - r.mean_mf / r.mean_lf)).abs() < 1e-10);
        }
    }

    #[test]
    fn permutation_round_trip(n in 2usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let x = random(n, 2, seed, -1.0, 1.0);
        let back = data::gather_rows(&data::gather_rows(&x, &perm), &data::invert_permutation(&perm));
        prop_assert_eq!(back, x);
        let v = DVector::from_fn(n, |i, _| i as f64);
        prop_assert_eq!(data::gather_vec(&v, &perm)[0], perm[0] as f64);
    }
}
