//! Pipelines behind the `sosconv` binary: dataset generation, kernel
//! learning, reconstruction and evaluation, all driven by one TOML config.

pub mod commands;
pub mod config;
pub mod error;
pub mod pgm;
pub mod store;

pub use config::RunConfig;
pub use error::CliError;
