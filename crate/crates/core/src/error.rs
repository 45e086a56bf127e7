use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
///
/// The variants group into the four exit classes used by the CLI:
/// configuration, data, numerical divergence, and internal contract
/// violations.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("clip too short: {0}")]
    TooShort(String),

    #[error("degenerate corpus: {0}")]
    DegenerateCorpus(String),

    #[error("value outside domain: {0}")]
    Domain(String),

    #[error("anomaly budget error: {0}")]
    Budget(String),

    #[error("batch composition error: {0}")]
    Composition(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("training diverged at iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error on {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether this error stems from user configuration rather than data or numerics.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Budget(_))
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
