//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by model construction, inference, and I/O.
#[derive(Debug, Error)]
pub enum GprnError {
    /// Invalid arguments or malformed user input.
    #[error("invalid input: {0}")]
    Input(String),

    /// A matrix that must be positive definite could not be factored,
    /// even after the jitter ladder.
    #[error("matrix '{role}' is singular or not positive definite (tried jitter up to {max_jitter:e})")]
    SingularMatrix { role: String, max_jitter: f64 },

    /// A numerical routine produced a non-finite value.
    #[error("numerical failure in {context}: {detail}")]
    Numerical { context: String, detail: String },

    /// An MCMC step could not find an acceptable state.
    #[error("sampler step failed: {0}")]
    StepFailure(String),

    /// All variational restarts failed.
    #[error("variational fit failed: {0}")]
    FitFailure(String),

    /// Parse errors from config or data files, with location info.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    /// File-system errors, tagged with the offending path.
    #[error("io error on '{path}': {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl GprnError {
    pub fn input(msg: impl Into<String>) -> Self {
        GprnError::Input(msg.into())
    }

    pub fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        GprnError::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        GprnError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            GprnError::Input(_) | GprnError::Parse { .. } | GprnError::Io { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, GprnError>;
