use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("insufficient length: need {needed} steps, have {available}")]
    InsufficientLength { needed: usize, available: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("prior rejection sampling exhausted after {0} attempts")]
    PriorRejection(usize),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("pipeline error: {0}")]
    Pipeline(String),
    #[error("model mismatch: {0}")]
    ModelMismatch(String),
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status for the command-line tool: 2 for bad input, 3 for
    /// a model that does not match the configuration, 4 for a missing
    /// artifact, 5 for numerical or pipeline failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::ModelMismatch(_) => 3,
            Error::MissingArtifact(_) => 4,
            Error::Numerical(_) | Error::Pipeline(_) => 5,
            _ => 2,
        }
    }
}
