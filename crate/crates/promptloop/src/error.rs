//! Crate-wide error type. Variants map one-to-one onto CLI exit codes.

use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum Error {
    /// Bad configuration or malformed input (exit code 1).
    Config { context: String, msg: String },
    /// A required artifact from an earlier stage is absent (exit code 2).
    MissingDependency { what: String, path: PathBuf },
    /// Numerical failure: NaN/inf, divergence, out-of-range values (exit code 3).
    Numerical { op: String, msg: String },
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(context: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { context: context.into(), msg: msg.into() }
    }

    pub fn missing(what: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        Error::MissingDependency { what: what.into(), path: path.into() }
    }

    pub fn numerical(op: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Numerical { op: op.into(), msg: msg.into() }
    }

    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().to_path_buf(), source }
    }

    /// Process exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Io { .. } => 1,
            Error::MissingDependency { .. } => 2,
            Error::Numerical { .. } => 3,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config { context, msg } => write!(f, "config error ({context}): {msg}"),
            Error::MissingDependency { what, path } => {
                write!(f, "missing dependency: {what} at {}", path.display())
            }
            Error::Numerical { op, msg } => write!(f, "numerical failure in {op}: {msg}"),
            Error::Io { path, source } => write!(f, "io error at {}: {source}", path.display()),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io { path: PathBuf::new(), source: e }
    }
}
