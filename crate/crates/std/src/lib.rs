//! Configs, file formats, experiment drivers and the `demkit` command line
//! on top of `demkit-core`.

pub mod cli;
pub mod config;
mod error;
pub mod experiment;
pub mod gradcheck;
pub mod output;

pub use error::{exit, CliError, CliResult};
