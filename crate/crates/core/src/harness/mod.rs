//! Experiment orchestration: configuration, metrics and record files, the
//! end-to-end round loop, and the quadratic convergence testbed.

pub mod config;
pub mod experiment;
pub mod metrics;
pub mod pl;
pub mod selftest;

pub use config::{ConfigError, DatasetKind, ExperimentConfig, PartitionKind, DATA_DIR_ENV};
pub use experiment::{load_data, run_experiment, write_run, ExperimentError, ExperimentRun};
pub use metrics::{
    evaluate, records_from_csv, records_to_csv, records_to_jsonl, robustness, write_records,
    RecordError, RoundRecord, CSV_HEADER, ROBUST_EPSILON,
};
pub use pl::{run_pl_testbed, PlConfig, PlError, PlReport, PlStrategy};
