use std::io;

use thiserror::Error;

pub type Result<T, E = FrpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FrpError {
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("weight file format error: {0}")]
    Format(String),

    #[error("unsupported weight file: {0}")]
    Version(String),

    #[error("training diverged at {stage} {index}: non-finite loss")]
    Training { stage: &'static str, index: usize },

    #[error("logic error: {0}")]
    Logic(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

/// Coarse error classes, used by the command line to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl FrpError {
    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        FrpError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            FrpError::Config(_) | FrpError::Shape(_) | FrpError::Logic(_) => ErrorClass::Config,
            FrpError::Training { .. } | FrpError::Metric(_) => ErrorClass::Numeric,
            FrpError::Geometry(_)
            | FrpError::Data(_)
            | FrpError::Parse { .. }
            | FrpError::Format(_)
            | FrpError::Version(_)
            | FrpError::Io { .. } => ErrorClass::Data,
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn tag(&self) -> &'static str {
        match self {
            FrpError::Geometry(_) => "geometry",
            FrpError::Shape(_) => "shape",
            FrpError::Config(_) => "config",
            FrpError::Data(_) => "data",
            FrpError::Parse { .. } => "parse",
            FrpError::Format(_) => "format",
            FrpError::Version(_) => "version",
            FrpError::Training { .. } => "training",
            FrpError::Logic(_) => "logic",
            FrpError::Metric(_) => "metric",
            FrpError::Io { .. } => "io",
        }
    }
}
