//! Files, configuration and the command line around `kpu-core`.

pub mod ablation;
pub mod analyze;
pub mod checkpoint;
pub mod cli;
pub mod config;
mod error;
pub mod metrics;
pub mod runner;

pub use error::{CheckpointError, KpuError, Result};
