//! Experiment runner for drug-involvement classification of cause-of-death
//! text: declarative run configs, locked and resumable run directories,
//! and the `codtox` command line.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod families;
pub mod manifest;
pub mod report;
pub mod run;
pub mod rundir;

pub use cli::dispatch;
pub use config::{LoadedConfig, RunConfig};
pub use error::{AppError, Result};
pub use manifest::RunManifest;
pub use run::{run_experiment, RunOptions, RunOutcome, Until};
