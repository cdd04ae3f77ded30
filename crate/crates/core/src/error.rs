use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CatError> = std::result::Result<T, E>;

/// Errors raised across the harness. Variants are grouped by the exit-code
/// class the command line maps them to.
#[derive(Debug, Error)]
pub enum CatError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: unknown label {label:?} (expected one of {expected:?})")]
    UnknownLabel {
        path: PathBuf,
        line: usize,
        label: String,
        expected: Vec<String>,
    },

    #[error("{path}:{line}: duplicate id {id:?} (first seen on line {first_line})")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        first_line: usize,
        id: String,
    },

    #[error("invalid task config: {0}")]
    InvalidTask(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("dataset too small: {0}")]
    TooSmall(String),

    #[error("missing prediction for {id:?} ({context})")]
    MissingPrediction { id: String, context: String },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CatError>,
    },
}

impl CatError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CatError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        CatError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Strips stage wrappers.
    pub fn root(&self) -> &CatError {
        match self {
            CatError::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self.root(), CatError::Config(_))
    }

    pub fn is_transport(&self) -> bool {
        matches!(self.root(), CatError::Transport(_))
    }
}
