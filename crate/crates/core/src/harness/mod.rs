//! Experiment orchestration: configuration, bound and gadget suites, rate
//! ladders, the train/sample pipeline and report emission.

pub mod config;
pub mod pipeline;
pub mod rates;
pub mod report;
pub mod verify;

pub use config::ExperimentConfig;
pub use pipeline::{run_pipeline, run_training};
pub use rates::run_rate_study;
pub use report::ExperimentReport;
pub use verify::run_verify;
