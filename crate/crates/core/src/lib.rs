//! Structured pruning of dense networks from two per-unit diagnostics: a
//! class-separation utilization score and a first-order reconstruction error.
//! A layer-wise removal count is picked with a tolerance-of-difference level.

pub mod baselines;
pub mod convergence;
pub mod diagnostics;
pub mod dumpio;
pub mod mininet;
pub mod planner;
pub mod rng;
pub mod stats;
pub mod surgery;

pub use baselines::{BaselineSpec, Method};
pub use convergence::{run_convergence, ConvergenceConfig, ConvergenceReport};
pub use diagnostics::{
    diagnose_layer, reconstruction_errors, utilization_scores, DiagnosticsError, ErrorMode,
    LayerDiagnostics, LayerDumps, ReportMeta, ScoreConfig, ScoreReport, SwConfig,
};
pub use dumpio::{
    read_dump, write_dump, ActivationDump, Dump, DumpError, DumpKind, GradientDump, ParamDump,
};
pub use mininet::{BlobSpec, Dataset, MiniNet, NetError, Split, TrainConfig};
pub use planner::{build_plan, select_m, tod, LayerPlan, ParamLayout, PlanError, PruningPlan};
pub use stats::{sliced_wasserstein, wasserstein_1d, SampleNd};
pub use surgery::{apply, SurgeryError, SurgeryReport};
