//! Experiment configuration, orchestration over tasks, metrics, and run
//! artifacts.

pub mod artifacts;
pub mod config;
pub mod metrics;
pub mod report;
pub mod runner;
pub mod trace;

pub use artifacts::run_to_dir;
pub use config::{Algorithm, ExperimentConfig};
pub use metrics::{avg_accuracy, forgetting, AccuracyMatrix};
pub use runner::{prepare, run_experiment, run_experiment_with, with_threads, Prepared, RunArtifacts, Summary};
pub use trace::TraceRow;
