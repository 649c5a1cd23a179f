use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A Lie-group operation left its valid domain (rotation angle too close to π).
    #[error("domain error{}: {message}", index_suffix(*.index))]
    Domain {
        message: String,
        index: Option<usize>,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("index {index} out of range {lo}..={hi}")]
    Index { index: usize, lo: usize, hi: usize },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("numerical failure: {message} (residual {residual:e})")]
    Numerical { message: String, residual: f64 },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("surrogate failed at step t={step}, scan {scan}: {source}")]
    Surrogate {
        step: usize,
        scan: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("all {failures} trials failed; first failure: {first}")]
    AllTrialsFailed { failures: usize, first: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error at {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

fn index_suffix(index: Option<usize>) -> String {
    match index {
        Some(i) => format!(" at index {i}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn domain(message: impl Into<String>) -> Self {
        Error::Domain {
            message: message.into(),
            index: None,
        }
    }

    /// Attach an element index to a domain or degeneracy error; other variants pass through.
    pub fn at_index(self, i: usize) -> Self {
        match self {
            Error::Domain { message, .. } => Error::Domain {
                message,
                index: Some(i),
            },
            Error::Degenerate(m) => Error::Degenerate(format!("{m} (index {i})")),
            other => other,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
