use std::path::PathBuf;

use ldznet::LdzError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing upstream artifact `{stage}` at {} (expected config hash {expected}); run `{stage}` first", path.display())]
    MissingArtifact { stage: String, path: PathBuf, expected: String },
    #[error("{what}: expected sha256 {expected}, found {found}")]
    HashMismatch { what: String, expected: String, found: String },
    #[error("{stage} is incomplete at {}", path.display())]
    Incomplete { stage: String, path: PathBuf },
    #[error(transparent)]
    Core(#[from] LdzError),
}

pub type RunResult<T> = std::result::Result<T, RunError>;

impl RunError {
    pub fn kind(&self) -> &'static str {
        match self {
            RunError::Config(_) => "config",
            RunError::MissingArtifact { .. } => "missing_artifact",
            RunError::HashMismatch { .. } => "hash_mismatch",
            RunError::Incomplete { .. } => "incomplete",
            RunError::Core(LdzError::Diverged { .. }) => "diverged",
            RunError::Core(LdzError::Checkpoint(_)) => "checkpoint",
            RunError::Core(LdzError::Dataset(_)) => "dataset",
            RunError::Core(_) => "runtime",
        }
    }

    /// Single-line JSON for stderr.
    pub fn to_line(&self) -> String {
        let mut obj = serde_json::Map::new();
        obj.insert("error".into(), self.kind().into());
        obj.insert("message".into(), self.to_string().into());
        match self {
            RunError::MissingArtifact { stage, path, expected } => {
                obj.insert("stage".into(), stage.clone().into());
                obj.insert("path".into(), path.display().to_string().into());
                obj.insert("expected".into(), expected.clone().into());
            }
            RunError::HashMismatch { expected, found, .. } => {
                obj.insert("expected".into(), expected.clone().into());
                obj.insert("found".into(), found.clone().into());
            }
            _ => {}
        }
        serde_json::Value::Object(obj).to_string()
    }
}
