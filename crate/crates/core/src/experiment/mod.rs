//! Synthetic bi-fidelity problems, error metrics and the end-to-end driver.

pub mod metrics;
pub mod pipeline;
pub mod synthetic;

pub use metrics::{error_component, error_field, ErrorMetric, ErrorReport};
pub use pipeline::{
    estimate, plan, run_pipeline, AutoOr, EstimateOutput, PipelineConfig, PipelineRun, PlanOutput,
    ResolvedHyperParameters, SolverKind, StageTiming,
};
pub use synthetic::{generate, GeneratorId, SyntheticProblem, SyntheticSpec};
