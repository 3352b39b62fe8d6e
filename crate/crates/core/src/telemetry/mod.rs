//! Gradient-norm traces, parameter deltas, run classification and
//! multi-seed aggregation.

mod analysis;
pub mod emit;
mod records;

pub use analysis::{aggregate_runs, classify_run, layer_delta, model_deltas};
pub use records::{
    Aggregate, ComponentDelta, DeltaRecord, LayerDelta, Outcome, Reference, RunResult,
    RunTelemetry, StepRecord,
};
