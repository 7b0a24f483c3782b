//! Command-line front end: run configuration and the subcommand bodies.

pub mod commands;
pub mod config;

pub use config::RunConfig;
