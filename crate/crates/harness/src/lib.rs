//! Orchestration for cross-resolution keypoint distillation: configuration,
//! training, evaluation, checkpoints, metrics and reports.

pub mod checkpoint;
pub mod config;
mod error;
pub mod eval;
pub mod gradsuite;
pub mod metrics;
pub mod report;
pub mod selftest;
pub mod train;

pub use error::{HarnessError, Result};
