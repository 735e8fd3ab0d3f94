//! Experiment orchestration: config, population building, multi-mode runs,
//! grid sweeps and metric emission.

mod config;
mod metrics;
mod run;

pub use config::{DataSource, ExperimentConfig, PartitionSpec, SCHEMA_VERSION};
pub use metrics::{emit_csv, emit_plotdata, parse_csv, plot_series, to_csv, MetricsRow, Scope, CSV_HEADER};
pub use run::{
    build_partition, evaluate, final_metric, run_experiment, run_experiment_with, run_mode, sweep, ExperimentOutcome,
    ModeOutcome, Population, SweepCell, SweepTable, INCOMPLETE_FILE,
};
