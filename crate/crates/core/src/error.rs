use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("reduction over an empty tensor")]
    EmptyReduction,

    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarLoss(String),

    #[error("{op}: argument outside the domain ({detail})")]
    Domain { op: &'static str, detail: String },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("parse error in {path} at line {line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },

    #[error("synthetic data generation failed: {0}")]
    Generation(String),

    #[error("non-finite {component} at epoch {epoch}, step {step}")]
    NonFinite {
        component: &'static str,
        epoch: usize,
        step: usize,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl std::fmt::Display, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_string(),
            detail: detail.into(),
        }
    }

    /// Coarse classification used by front ends to pick an exit status.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidConfig(_) => ErrorKind::Config,
            Error::ConfigMismatch(_)
            | Error::Format { .. }
            | Error::Parse { .. }
            | Error::Generation(_)
            | Error::UndefinedMetric(_)
            | Error::Io { .. } => ErrorKind::Data,
            Error::Shape(_)
            | Error::EmptyReduction
            | Error::NonScalarLoss(_)
            | Error::Domain { .. }
            | Error::DegenerateInput(_) => ErrorKind::Contract,
            Error::NonFinite { .. } => ErrorKind::Numerical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Contract,
    Numerical,
}
