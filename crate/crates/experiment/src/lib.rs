//! Experiment runner: configuration, seeds and methods, aggregation and
//! reports for `cvt-core`.

pub mod config;
pub mod error;
pub mod report;
pub mod runner;
pub mod summary;

pub use config::ExperimentConfig;
pub use error::ExperimentError;
pub use report::emit_report;
pub use runner::run_experiment;
