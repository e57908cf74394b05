//! Command-line front end: configuration, commands and report emission.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod plot;

pub use config::RunConfig;
pub use error::{CliError, Result};
