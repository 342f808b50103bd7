//! Experiment harness around `dpd-core`: configuration files, checkpoints,
//! scene files, run orchestration and report tables.

pub mod checkpoint;
pub mod config;
pub mod csvout;
pub mod error;
pub mod harness;
pub mod record;
pub mod report;
pub mod sceneio;
pub mod selftest;

pub use config::ExperimentConfig;
pub use error::{LabError, Result};
pub use record::RunRecord;
