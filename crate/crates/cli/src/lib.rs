//! Command implementations behind the `rkf` binary.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;

pub use config::RunConfig;
pub use error::CliError;
