//! Library behind the `eegtok` binary: configuration, datasets, run
//! directories and the training / evaluation pipeline.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod models;
pub mod ops;
pub mod pipeline;
pub mod rundir;
pub mod train;

pub use commands::run;
pub use error::{CliError, CliResult};
