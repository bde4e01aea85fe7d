//! Experiment orchestration: configuration, round-trip reconstruction runs,
//! efficiency sweeps, scalar metrics, and report emission.

pub mod config;
pub mod metrics;
pub mod run;

pub use config::{
    parse_config, ErrorModelSpec, ExperimentConfig, GridSpec, ModelInstance, ModelSpec,
    OutputSpec, ScheduleSpec,
};
pub use metrics::{
    emit_aggregate_csv, emit_csv, mse, psnr, MethodAggregate, MetricsReport, TrialFailure,
    TrialRow, PSNR_EXACT_SENTINEL,
};
pub use run::{dump_first_trial_trajectories, run_bench, run_roundtrip};
