use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("tolerance failure: {}", failed.join(", "))]
    ToleranceFailure { failed: Vec<String> },

    #[error(transparent)]
    Engine(#[from] mprsens::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("writing {}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("serializing report: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::ToleranceFailure { .. } => 1,
            CliError::Config { .. } => 2,
            _ => 3,
        }
    }
}
