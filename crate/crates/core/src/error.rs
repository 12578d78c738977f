use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path}: {message}")]
    Json { path: PathBuf, message: String },

    #[error("malformed volume file {path}: {message}")]
    VolumeFormat { path: PathBuf, message: String },

    #[error("preprocessing failed for {sample_id}: {message}")]
    Preprocess { sample_id: String, message: String },

    #[error("atlas error: class {class} {message}")]
    Atlas { class: u32, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("attention contract violated: {0}")]
    Contract(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("training diverged at epoch {epoch}, step {step}: {message}")]
    Diverged {
        epoch: usize,
        step: usize,
        message: String,
    },

    #[error("invalid argument: {0}")]
    Argument(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Json {
            path: path.into(),
            message: err.to_string(),
        }
    }

    /// Name of the pipeline stage an error belongs to, used for CLI reporting.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Io { .. } | Error::Json { .. } | Error::VolumeFormat { .. } => "io",
            Error::Preprocess { .. } => "preprocess",
            Error::Atlas { .. } => "atlas",
            Error::Shape(_) | Error::Contract(_) => "model",
            Error::Eval(_) => "geometry",
            Error::Diverged { .. } => "training",
            Error::Argument(_) => "explain",
        }
    }
}
