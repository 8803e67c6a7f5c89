//! Command-line entry points for training, refinement, generation,
//! evaluation, dataset construction and the review service.

pub mod commands;
pub mod config;
pub mod error;
pub mod run;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
