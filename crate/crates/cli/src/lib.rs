//! Command-line orchestration of the fairtrans experiment: configuration,
//! resumable run directories, reports, comparisons and seed sweeps.

pub mod app;
pub mod compare;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod workspace;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
pub use pipeline::{run_experiment, RunOutcome};
pub use workspace::RunManifest;
