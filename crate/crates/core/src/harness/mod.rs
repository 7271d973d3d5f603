//! Experiment harness: configuration, the source/target pipeline, and
//! learning-curve output.

mod config;
mod metrics;
mod runner;

pub use config::{ExperimentConfig, Preset, STRATEGY_LABELS};
pub use metrics::{
    average_runs, read_csv, read_csv_file, to_csv_bytes, write_csv, CurveKey, Metric,
    MetricsRecord, CSV_COLUMNS, PADDING_NOTE,
};
pub use runner::{
    evaluate_checkpoint, evaluate_subset, grid, run_experiment, source_tasks, train, Cell,
    CellReport, CellStatus, EpochRecord, ExperimentReport, TrainOutcome, TrainSetup,
};
