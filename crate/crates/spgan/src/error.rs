use std::path::PathBuf;

/// Error type shared by every module in the crate.
///
/// The variants separate caller mistakes (`Usage`), bad model/run
/// descriptions (`Config`), numeric failures (`Numeric`), and I/O or
/// file-format trouble, so the CLI can map them to distinct exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration: shape mismatch, bad hyperparameter, config
    /// file violating an invariant.
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse: non-scalar loss, too few samples, and similar.
    #[error("usage error: {0}")]
    Usage(String),

    /// Numerical failure: NaN/Inf loss, matrix not PSD within tolerance.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// I/O failure with the offending path attached.
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Corrupt or mismatched binary artifact (checkpoint, feature file).
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
