use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MilError>;

#[derive(Debug, Error)]
pub enum MilError {
    #[error("invalid configuration: `{field}` {reason}")]
    Config { field: String, reason: String },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("index {index} out of range for {context} of length {len}")]
    Index {
        context: String,
        index: usize,
        len: usize,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("data integrity error in blob {blob}: {reason}")]
    Integrity { blob: PathBuf, reason: String },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("non-finite value in {role} at phase {phase}, epoch {epoch}")]
    NonFinite {
        role: String,
        phase: usize,
        epoch: usize,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("structural mismatch: {0}")]
    Structure(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl MilError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        MilError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        MilError::Shape {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MilError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        MilError::Json {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line runner: 2 usage/config,
    /// 3 I/O or data, 4 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            MilError::Config { .. } | MilError::Shape { .. } | MilError::Index { .. } => 2,
            MilError::Data(_)
            | MilError::Integrity { .. }
            | MilError::Eval(_)
            | MilError::Structure(_)
            | MilError::Io { .. }
            | MilError::Json { .. } => 3,
            MilError::NonFinite { .. } | MilError::Invariant(_) => 4,
        }
    }
}
