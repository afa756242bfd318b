use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("numeric error in {context}: {detail}")]
    Numeric { context: String, detail: String },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("structural error: {0}")]
    Structural(String),
    #[error("index {index} out of range (len {len}) in {context}")]
    Index {
        context: &'static str,
        index: usize,
        len: usize,
    },
    #[error("config error at `{field}`: {detail}")]
    Config { field: String, detail: String },
    #[error("task {task} data is sealed; replay of earlier tasks is not permitted")]
    ReplayViolation { task: usize },
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("checkpoint corrupt at `{path}`: {detail}")]
    Corrupt { path: String, detail: String },
    #[error("version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub fn corrupt(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error after peeling stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
