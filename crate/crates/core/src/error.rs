use std::fmt;
use std::path::PathBuf;

/// Errors raised anywhere in the library.
///
/// The CLI maps the variants onto its exit codes: configuration and usage
/// problems, data/format problems, and numeric failures each get their own.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("unknown domain `{0}`")]
    UnknownDomain(String),
    #[error("operation `{0}` is not allowed in inference mode")]
    Mode(&'static str),
    #[error("metric {metric} undefined: {reason}")]
    UndefinedMetric {
        metric: &'static str,
        reason: &'static str,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Dimension { .. }
            | Error::Config(_)
            | Error::Usage(_)
            | Error::UnknownDomain(_)
            | Error::Mode(_) => ErrorClass::Config,
            Error::Format { .. } | Error::Validation(_) | Error::Io { .. } => ErrorClass::Data,
            Error::NonFinite(_) | Error::UndefinedMetric { .. } => ErrorClass::Numeric,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl fmt::Display) -> Self {
        Error::Config(msg.to_string())
    }

    pub(crate) fn format(offset: u64, msg: impl fmt::Display) -> Self {
        Error::Format {
            offset,
            msg: msg.to_string(),
        }
    }
}
