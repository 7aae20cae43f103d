use std::path::PathBuf;

/// Errors raised across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A documented precondition was not met by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A line of a JSONL or checkpoint file could not be parsed.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// A loaded or constructed value breaks a type invariant.
    #[error("pool '{pool}': {message}")]
    Invariant { pool: String, message: String },

    #[error("pool '{pool}', candidate {candidate}: scorer failed: {message}")]
    Scorer {
        pool: String,
        candidate: usize,
        message: String,
    },

    /// Training produced a non-finite loss or gradient.
    #[error("non-finite loss at step {step} (epoch {epoch}, alpha {alpha}): {detail}")]
    NonFinite {
        step: usize,
        epoch: usize,
        alpha: f64,
        detail: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
