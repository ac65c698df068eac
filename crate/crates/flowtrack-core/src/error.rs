use thiserror::Error;

/// Errors produced by validation, file I/O, and training.
#[derive(Debug, Error)]
pub enum Error {
    /// Array or field shapes do not agree.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },
    /// An input contained NaN or infinite values.
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    /// A stride, radius, or size argument is invalid.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A configuration value violates its invariants.
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    /// A file did not match its documented byte layout.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },
    /// Checkpoint names or shapes do not match the model being loaded into.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
