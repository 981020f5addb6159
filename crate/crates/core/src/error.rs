//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI maps them to exit codes: bad or
//! inconsistent inputs are data errors, non-finite values during training
//! or checking are numerical failures.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or dimension disagreement between tensors.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid input data (bad ids, empty inputs, contract violations).
    #[error("invalid data: {0}")]
    Data(String),

    /// NaN/Inf where a finite value is required.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Malformed file content (triple files, containers, checkpoints).
    #[error("parse error{}: {msg}", fmt_loc(.path, .line))]
    Parse {
        msg: String,
        path: Option<PathBuf>,
        line: Option<usize>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn fmt_loc(path: &Option<PathBuf>, line: &Option<usize>) -> String {
    match (path, line) {
        (Some(p), Some(l)) => format!(" at {}:{}", p.display(), l),
        (Some(p), None) => format!(" at {}", p.display()),
        (None, Some(l)) => format!(" at line {}", l),
        (None, None) => String::new(),
    }
}

impl Error {
    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse {
            msg: msg.into(),
            path: None,
            line: None,
        }
    }

    pub fn parse_at(msg: impl Into<String>, path: impl Into<PathBuf>, line: Option<usize>) -> Self {
        Error::Parse {
            msg: msg.into(),
            path: Some(path.into()),
            line,
        }
    }

    pub fn parse_line(msg: impl Into<String>, line: usize) -> Self {
        Error::Parse {
            msg: msg.into(),
            path: None,
            line: Some(line),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a path to a parse error that lacks one; other variants pass through.
    pub fn with_path(self, path: impl Into<PathBuf>) -> Self {
        match self {
            Error::Parse { msg, path: None, line } => Error::Parse {
                msg,
                path: Some(path.into()),
                line,
            },
            other => other,
        }
    }

    /// Prefix a parse error's message with surrounding context.
    pub fn with_context(self, ctx: &str) -> Self {
        match self {
            Error::Parse { msg, path, line } => Error::Parse {
                msg: format!("{ctx}: {msg}"),
                path,
                line,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
