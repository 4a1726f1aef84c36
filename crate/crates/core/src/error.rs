use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the affordance-learning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (unknown id, bad index, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("scene generation failed: could not place category `{category}` after {attempts} attempts")]
    Placement { category: String, attempts: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed input in {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("missing artifact: {0}")]
    Missing(PathBuf),

    #[error("refusing to overwrite existing path {0} (use --force)")]
    Exists(PathBuf),

    #[error("rollout rejected: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit status: 2 refusal to overwrite, 3 missing artifact,
    /// 4 malformed input or config, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Exists(_) => 2,
            Error::Missing(_) => 3,
            Error::Malformed { .. } | Error::Config(_) | Error::Json(_) | Error::Csv(_) => 4,
            _ => 1,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
