use thiserror::Error;

#[derive(Debug, Error)]
pub enum LdzError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {message}")]
    Image { path: String, message: String },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("out-of-vocabulary tokens: {}", .0.join(", "))]
    OutOfVocabulary(Vec<String>),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{stage} diverged (non-finite loss) at step {step}")]
    Diverged { stage: String, step: usize },
    #[error("{what} out of range: {value} not in [{lo}, {hi}]")]
    Range {
        what: &'static str,
        value: i64,
        lo: i64,
        hi: i64,
    },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] ldz_tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, LdzError>;

pub fn io_err(path: impl AsRef<std::path::Path>) -> impl FnOnce(std::io::Error) -> LdzError {
    let path = path.as_ref().display().to_string();
    move |source| LdzError::Io { path, source }
}
