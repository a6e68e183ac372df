//! Command-line driver: configs, subcommands and run manifests.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{run, Command};
pub use config::RunConfig;
