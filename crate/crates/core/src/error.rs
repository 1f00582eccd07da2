use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the recognition pipeline can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("degenerate MLP output (norm {norm:e})")]
    DegenerateOutput { norm: f64 },

    #[error("missing cache key {key:?}")]
    MissingKey { key: String },

    #[error("encoder backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("corrupt cache entry {key:?}: {reason}")]
    CorruptCache { key: String, reason: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    TrainingDiverged { epoch: usize, batch: usize, loss: f64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("text encoder failed for category {category:?}: {source}")]
    Category {
        category: String,
        #[source]
        source: Box<Error>,
    },

    #[error("image {image_id}, stage {stage}: {source}")]
    Stage {
        image_id: u64,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error in {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Process exit code: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => 2,
            Error::DegenerateEmbedding(_)
            | Error::DegenerateVector(_)
            | Error::DegenerateOutput { .. }
            | Error::TrainingDiverged { .. }
            | Error::Numeric(_) => 4,
            Error::Category { source, .. } | Error::Stage { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}
