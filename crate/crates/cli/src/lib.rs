//! Command-line driver: run configuration and subcommand adapters.

pub mod commands;
pub mod config;

pub use commands::{run, Cli};
pub use config::{CorpusSizes, RunConfig};
