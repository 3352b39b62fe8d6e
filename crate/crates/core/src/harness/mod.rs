//! Synthetic tasks, task metrics, and the multi-seed benchmark, threshold
//! sweep and gradual-unfreezing experiments behind the CLI.

pub mod config;
pub mod metrics;
pub mod report;
mod runner;
pub mod tasks;

pub use config::{
    default_approaches, Approach, Config, GuExperimentConfig, RunsConfig, Schedule, SweepConfig,
    TelemetryConfig, DEFAULT_THRESHOLDS,
};
pub use metrics::{accuracy, f1, mcc, Confusion, Metric};
pub use runner::{
    run_id, run_parallel, BenchmarkReport, Cell, CellAggregate, GuReport, Lab, RunFailure,
    RunOutput, SweepReport, SweepRow, TrajectoryPoint, FULL, GU, GU_RESTART,
};
pub use tasks::{default_tasks, gen_dataset, Pattern, TaskSpec};
