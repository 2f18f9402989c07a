use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("artifact missing: {}", .0.display())]
    ArtifactMissing(PathBuf),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("corrupt weights: {0}")]
    CorruptWeights(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("vocab error: {0}")]
    Vocab(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("degenerate task: {0}")]
    DegenerateTask(String),

    #[error("empty evaluation set")]
    EmptyEvaluation,

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("label error: {0}")]
    Label(String),

    #[error("task `{task}`: {source}")]
    Task {
        task: String,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_task(self, task: &str) -> Self {
        Error::Task {
            task: task.to_string(),
            source: Box::new(self),
        }
    }

    /// The innermost error, looking through task tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Task { source, .. } => source.root(),
            other => other,
        }
    }
}
