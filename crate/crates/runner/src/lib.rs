//! Experiment orchestration: configuration, content-addressed stage
//! artifacts and the comparison report.

pub mod artifact;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

pub use artifact::{Artifact, RunManifest, StageKey};
pub use config::ExperimentConfig;
pub use error::{RunError, RunResult};
pub use pipeline::{Pipeline, Upstream};
pub use report::ComparisonTable;
