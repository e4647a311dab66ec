use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("component {component} has zero variance over the low-fidelity set")]
    ZeroVariance { component: usize },

    #[error("instance {instance} has zero norm")]
    ZeroNorm { instance: usize },

    #[error("high-fidelity data is required but absent")]
    MissingHighFidelity,

    #[error("point {index} has a zero self-tuning scale (too many exact duplicates)")]
    DuplicatePointScale { index: usize },

    #[error("node {index} has zero degree")]
    ZeroDegree { index: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("input contains non-finite values")]
    NonFiniteInput,

    #[error("dense path limited to N <= {limit}, got N = {n}")]
    DenseLimitExceeded { n: usize, limit: usize },

    #[error("eigenpair {k} did not converge (residual {residual:.3e})")]
    ConvergenceFailure { k: usize, residual: f64 },

    #[error("linear system is singular or not positive definite")]
    SingularSystem,

    #[error("spectrum has {available} eigenpairs, {required} required")]
    InsufficientSpectrum { available: usize, required: usize },

    #[error("no eigenvalue is distinguishable from zero")]
    AllZeroSpectrum,

    #[error("calibration target {target:.6e} not bracketed (stddev range [{low:.6e}, {high:.6e}])")]
    NoBracket { target: f64, low: f64, high: f64 },

    #[error("invalid regularization schedule: {0}")]
    InvalidSchedule(String),

    #[error("approximate degree of node {index} is not positive; increase or resample the landmarks")]
    NegativeApproxDegree { index: usize },

    #[error("landmark weight block is numerically zero")]
    SingularLandmarkBlock,

    #[error("iterative solve stalled at relative residual {residual:.3e}")]
    IterativeDivergence { residual: f64 },

    #[error("Woodbury capacitance matrix is numerically singular")]
    SingularCapacitance,

    #[error("reference column {column} has zero mean magnitude")]
    ZeroReferenceColumn { column: usize },

    #[error("reference set has zero mean norm")]
    ZeroReferenceSet,

    #[error("malformed matrix file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse failure class, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Io,
    Validation,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            Io(_) | Format(_) | Json(_) => ErrorClass::Io,
            ZeroVariance { .. }
            | ZeroNorm { .. }
            | MissingHighFidelity
            | DimensionMismatch(_)
            | InvalidArgument(_)
            | NonFiniteInput
            | DenseLimitExceeded { .. }
            | InsufficientSpectrum { .. }
            | InvalidSchedule(_)
            | ZeroReferenceColumn { .. }
            | ZeroReferenceSet
            | DuplicatePointScale { .. } => ErrorClass::Validation,
            ZeroDegree { .. }
            | ConvergenceFailure { .. }
            | SingularSystem
            | AllZeroSpectrum
            | NoBracket { .. }
            | NegativeApproxDegree { .. }
            | SingularLandmarkBlock
            | IterativeDivergence { .. }
            | SingularCapacitance => ErrorClass::Numerical,
        }
    }

    /// Short machine-readable name of the variant.
    pub fn code(&self) -> &'static str {
        use Error::*;
        match self {
            ZeroVariance { .. } => "ZeroVariance",
            ZeroNorm { .. } => "ZeroNorm",
            MissingHighFidelity => "MissingHighFidelity",
            DuplicatePointScale { .. } => "DuplicatePointScale",
            ZeroDegree { .. } => "ZeroDegree",
            DimensionMismatch(_) => "DimensionMismatch",
            InvalidArgument(_) => "InvalidArgument",
            NonFiniteInput => "NonFiniteInput",
            DenseLimitExceeded { .. } => "DenseLimitExceeded",
            ConvergenceFailure { .. } => "ConvergenceFailure",
            SingularSystem => "SingularSystem",
            InsufficientSpectrum { .. } => "InsufficientSpectrum",
            AllZeroSpectrum => "AllZeroSpectrum",
            NoBracket { .. } => "NoBracket",
            InvalidSchedule(_) => "InvalidSchedule",
            NegativeApproxDegree { .. } => "NegativeApproxDegree",
            SingularLandmarkBlock => "SingularLandmarkBlock",
            IterativeDivergence { .. } => "IterativeDivergence",
            SingularCapacitance => "SingularCapacitance",
            ZeroReferenceColumn { .. } => "ZeroReferenceColumn",
            ZeroReferenceSet => "ZeroReferenceSet",
            Format(_) => "Format",
            Io(_) => "Io",
            Json(_) => "Json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
