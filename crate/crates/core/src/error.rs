use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input (dimension mismatch, bad range, bad label).
    #[error("invalid input: {0}")]
    Input(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("training diverged at step {step}{}: {message}", member.map(|m| format!(" (member {m})")).unwrap_or_default())]
    Training {
        step: usize,
        member: Option<usize>,
        message: String,
    },

    #[error("dense curvature needs {parameters} parameters but the limit is {limit}")]
    Capacity { parameters: usize, limit: usize },

    #[error("example {index} has zero self-influence")]
    DegenerateExample { index: usize },

    #[error("column {column} has zero variance")]
    DegenerateColumn { column: u64 },

    #[error("exponential fit did not converge: {0}")]
    Fit(String),

    #[error("evaluation failed on job {job}: {source}")]
    Evaluation {
        job: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("config error: {0}")]
    Schema(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn unsupported(msg: impl Into<String>) -> Self {
        Error::Unsupported(msg.into())
    }

    /// Attaches an ensemble member index to a training error.
    pub fn with_member(self, member: usize) -> Self {
        match self {
            Error::Training { step, message, .. } => Error::Training {
                step,
                member: Some(member),
                message,
            },
            other => other,
        }
    }
}
