//! Workflow behind the `fcam` binary: dataset generation, two-stage
//! training, inference, evaluation, sweeps, ablations and plots, all
//! organized around a run directory.

pub mod commands;
pub mod error;
pub mod plot;
pub mod run;

pub use error::{CliError, CliResult};
pub use run::RunDir;
