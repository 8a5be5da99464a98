use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. The CLI maps variants onto exit codes
/// (usage 1, data 2, numeric 3), so keep the classification stable.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor-op shape mismatch; names the op and the offending extents.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An API precondition was violated (non-scalar loss, empty span, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed corpus or fixture data, with location when available.
    #[error("data error{}: {detail}", location.as_ref().map(|l| format!(" at {l}")).unwrap_or_default())]
    Data {
        location: Option<String>,
        detail: String,
    },

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Training diverged or produced non-finite values.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Embedding service failure after retries were exhausted.
    #[error("embedding service failure for {url}: {detail} (after {attempts} attempts)")]
    Service {
        url: String,
        attempts: usize,
        detail: String,
    },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn data(detail: impl Into<String>) -> Self {
        Error::Data {
            location: None,
            detail: detail.into(),
        }
    }

    pub fn data_at(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Data {
            location: Some(location.into()),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
