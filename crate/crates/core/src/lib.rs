//! Bayesian multi-fidelity estimation with graph-Laplacian priors.
//!
//! A large set of cheap low-fidelity points and a few expensive
//! high-fidelity evaluations are combined into a Gaussian posterior over
//! the low-to-high displacement of every point. Three back ends share one
//! interface: a dense reference solver, a truncated eigenbasis solver and a
//! Nystrom low-rank solver.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acquisition;
pub mod data;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod io;
pub mod krylov;
pub mod linalg;
pub mod nystrom;
pub mod posterior;
pub mod spectral;

pub use acquisition::{apply_permutation, kmeans, plan_acquisition, AcquisitionPlan, KMeans};
pub use data::{
    displacements, normalize, Dataset, DisplacementMatrices, HyperParameters, NormalizationMode,
    NormalizationSpec,
};
pub use error::{Error, ErrorClass, Result};
pub use graph::{build_graph, laplacian, AffinityGraph, GraphLaplacian, WeightColumns};
pub use io::MatrixFormat;
pub use nystrom::{
    build_saddle, nystrom_factor, nystrom_general_p, select_landmarks, solve_map_saddle,
    LowRankLaplacian, NystromCovariance, NystromOptions, SaddleMethod, SaddleOperators,
};
pub use posterior::{
    calibrate_omega, choose_tau, choose_tau_relative, dense_posterior, regularization_path, Calibration,
    CalibrationOptions, DenseSolver, NystromSolver, OmegaRule, PosteriorResult, PosteriorSolver,
    RegularizationPath, SolverTag, TruncatedSolver,
};
pub use spectral::{largest_eigenvalue, low_spectrum, EigenOptions, Spectrum};
