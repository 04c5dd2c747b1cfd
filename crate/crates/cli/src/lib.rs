//! Command-line front end and HTTP reward service for the shaping engine.

pub mod commands;
pub mod server;

pub use commands::{run, Cli, CliError};
