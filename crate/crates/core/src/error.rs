use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A named field or argument violated its invariant.
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("{what} of size {size} exceeds the limit of {limit}")]
    Capacity {
        what: &'static str,
        size: usize,
        limit: usize,
    },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("degenerate {0}")]
    Degenerate(String),

    #[error("index {index} out of range (len {len})")]
    Range { index: usize, len: usize },

    #[error("{0}")]
    Metric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
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

    /// Process exit code for the command-line front end.
    ///
    /// 2 config/validation, 3 capacity, 4 numerical degeneracy, 5 file format or io,
    /// 1 anything else. Stage wrappers report the code of their cause.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation { .. } | Error::Config(_) | Error::Geometry(_) => 2,
            Error::Capacity { .. } => 3,
            Error::Degenerate(_) => 4,
            Error::Format { .. } | Error::Io { .. } => 5,
            Error::Range { .. } | Error::Metric(_) => 1,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}

pub(crate) fn ensure_positive(field: &str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::validation(field, format!("must be > 0, got {value}")))
    }
}

pub(crate) fn ensure_non_negative(field: &str, value: f64) -> Result<()> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(Error::validation(field, format!("must be >= 0, got {value}")))
    }
}
