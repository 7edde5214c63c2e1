//! Desk-scale laboratory for backdoor fingerprints in a tiny language model.
//!
//! The crate embeds ownership fingerprints into a small decoder-only
//! transformer, removes them with a two-phase mismatched/clean fine-tuning
//! procedure, transfers the removal through a low-rank adapter, and runs the
//! model-level baselines (incremental fine-tuning, pruning, merging) through
//! the same FSR / PPL / ACC metrics.

pub mod baselines;
pub mod checkpoint;
pub mod error;
pub mod fingerprint;
pub mod lora;
pub mod meraser;
pub mod metrics;
pub mod ntk;
pub mod numkit;
pub mod tinylm;

pub use error::{Error, Result};
