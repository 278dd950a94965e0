//! Experiment harness: datasets, config files, train-to-threshold runs,
//! axis sweeps and report emission.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;
pub mod sweep;
pub mod train;

pub use error::{HarnessError, Result};
