//! File formats, dataset ingestion, run configuration, experiment
//! orchestration, plotting and the `splitmask` command line, built on
//! [`splitmask_core`].

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod metrics;
pub mod plot;
pub mod run;
pub mod sweep;

pub use error::{Error, Result};

/// Version string recorded in resolved configs and checkpoints.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
