//! Crate-wide error type.

use std::fmt;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by callers that map errors to process exit
/// codes: configuration/usage problems vs. runtime/data problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Runtime,
}

#[derive(Debug)]
pub enum Error {
    /// Tensor extents disagree with what an operation requires.
    Shape { op: &'static str, detail: String },
    /// Invalid configuration value or malformed config input.
    Config(String),
    /// Numerical failure: non-finite values where finite ones are required.
    NonFinite { op: &'static str, detail: String },
    /// A degenerate actor box (zero area after clamping).
    DegenerateBox { actor_id: u32 },
    /// Malformed or truncated on-disk data (tensor files, checkpoints, datasets).
    Format(String),
    /// Dataset or input contents violate a documented contract.
    Data(String),
    Io { path: PathBuf, source: std::io::Error },
    Json(serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            _ => ErrorKind::Runtime,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Error {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io { path: path.into(), source }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::NonFinite { op, detail } => write!(f, "{op}: non-finite values: {detail}"),
            Error::DegenerateBox { actor_id } => {
                write!(f, "degenerate box for actor {actor_id}: zero area after clamping")
            }
            Error::Format(msg) => write!(f, "malformed data: {msg}"),
            Error::Data(msg) => write!(f, "bad input data: {msg}"),
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
