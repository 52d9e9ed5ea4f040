//! Command-line front end: dataset generation, training, evaluation, the
//! ablation ladder and the α sweep, all writing under one output directory.

pub mod args;
pub mod commands;
pub mod error;
pub mod manifest;

pub use args::Cli;
pub use error::{CliError, Result};
