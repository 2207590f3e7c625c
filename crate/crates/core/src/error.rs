use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the harness can report.
///
/// Variants are grouped by the class the command line maps onto exit codes:
/// configuration problems, bad data, protocol violations and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate key ({group_id}, {seq_index}) at line {line}")]
    DuplicateKey {
        group_id: String,
        seq_index: u32,
        line: usize,
    },

    #[error("dimension mismatch: expected {expected}, found {found}{}", context_suffix(.context))]
    Dimension {
        expected: usize,
        found: usize,
        context: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("data error: {0}")]
    Data(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Diverged { iteration: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn context_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

/// Coarse failure class, used for exit codes and one-line error output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Protocol,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Protocol => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Config => "config",
            ErrorClass::Data => "data",
            ErrorClass::Protocol => "protocol",
        }
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Json(_) => ErrorClass::Config,
            Error::Protocol(_) => ErrorClass::Protocol,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(expected: usize, found: usize, context: impl Into<String>) -> Self {
        Error::Dimension {
            expected,
            found,
            context: context.into(),
        }
    }
}
