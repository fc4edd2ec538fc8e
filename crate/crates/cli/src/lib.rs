//! Command-line pipeline around the `sparsegam` library.

pub mod args;
pub mod config;
pub mod error;
pub mod fit;
pub mod output;
pub mod predict;
pub mod report;

pub use error::{CliError, CliResult};
