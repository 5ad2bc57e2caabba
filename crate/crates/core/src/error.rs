use std::path::PathBuf;

/// Errors produced by the simulator library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A partitioning request cannot be satisfied.
    #[error("infeasible partition: {partitions} partitions over {sublayers} active sublayers")]
    Infeasible { partitions: usize, sublayers: usize },

    /// A transition the elastic data-parallel state machine does not support.
    #[error("unsupported transition: {0}")]
    Unsupported(String),

    /// Scenario configuration failed validation. `path` is the dotted key path.
    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    /// Gradient-norm trace is missing rows or malformed.
    #[error("gradient-norm trace {}: {message}", path.display())]
    Trace { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by invalid user input rather than IO.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io(_) => false,
            Error::Json(e) => !e.is_io(),
            Error::Csv(e) => !matches!(e.kind(), csv::ErrorKind::Io(_)),
            _ => true,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
