use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing {what} at {path}; run `metadt {producer}` first")]
    MissingArtifact {
        what: String,
        path: PathBuf,
        producer: String,
    },
    #[error(
        "refusing to overwrite {path}: it was produced with config hash {found}, this run has {expected} (pass --force to replace it)"
    )]
    RefuseToOverwrite {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("{path}: {source}")]
    Config { path: PathBuf, source: toml::de::Error },
    #[error(transparent)]
    Core(#[from] metadt_core::CoreError),
    #[error(transparent)]
    Nn(#[from] metadt_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
