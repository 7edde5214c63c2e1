//! Experiment pipeline and command-line driver for the fingerprint erasure
//! lab.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod sweep;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
pub use pipeline::{run_pipeline, Lab, RunOutcome};
