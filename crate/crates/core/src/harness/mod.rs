//! Experiment orchestration.

pub mod config;
pub mod curve;
pub mod experiment;
pub mod grid;
pub mod heatmap;
pub mod records;
pub mod scenario;

pub use config::{ExperimentConfig, MethodTag};
pub use experiment::{fit_predictor, multi_start_run, run_experiment, Predictor, RunRecord};
pub use records::RecordStore;
