use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is not positive definite: {0}")]
    Singular(String),

    #[error("invalid input: {0}")]
    Input(String),

    /// An example that cannot be averaged over (no response tokens).
    #[error("degenerate example `{id}`: {reason}")]
    Degenerate { id: String, reason: String },

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("size guard exceeded: {0}")]
    Size(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("stale cache for stage `{stage}`: {reason}")]
    Cache { stage: String, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage: stage.to_string(),
                source: Box::new(e),
            },
        }
    }

    /// Stable, machine-parseable code for the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "E_SHAPE",
            Error::Singular(_) => "E_SINGULAR",
            Error::Input(_) => "E_INPUT",
            Error::Degenerate { .. } => "E_DEGENERATE",
            Error::Divergence { .. } => "E_DIVERGENCE",
            Error::Size(_) => "E_SIZE",
            Error::Precondition(_) => "E_PRECONDITION",
            Error::Format { .. } => "E_FORMAT",
            Error::Cache { .. } => "E_CACHE",
            Error::Config(_) => "E_CONFIG",
            Error::Stage { source, .. } => source.code(),
            Error::Io { .. } => "E_IO",
            Error::Json(_) => "E_FORMAT",
        }
    }
}
