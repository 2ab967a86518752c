use std::path::PathBuf;
use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum GadError {
    /// A caller violated an operation's precondition or a type invariant.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Configuration file or override problem (unknown key, bad value, ...).
    #[error("config error: {0}")]
    Config(String),

    /// A required earlier artifact (checkpoint, dataset, baseline) is missing.
    #[error("missing prerequisite: {0}")]
    Dependency(String),

    /// Training produced a non-finite loss term.
    #[error("training diverged at iteration {iteration}: term `{term}` is not finite{}",
            last_checkpoint.as_ref().map(|p| format!(" (last good checkpoint: {})", p.display())).unwrap_or_default())]
    Diverged {
        term: String,
        iteration: u64,
        last_checkpoint: Option<PathBuf>,
    },

    /// Checkpoint container is malformed or from an incompatible version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl GadError {
    pub fn contract(msg: impl Into<String>) -> Self {
        GadError::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GadError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 contract/config/dependency,
    /// 2 I/O, 3 diverged training.
    pub fn exit_code(&self) -> i32 {
        match self {
            GadError::Contract(_)
            | GadError::Config(_)
            | GadError::Dependency(_)
            | GadError::Checkpoint(_) => 1,
            GadError::Io { .. } | GadError::Image { .. } => 2,
            GadError::Diverged { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, GadError>;
