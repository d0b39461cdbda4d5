use thiserror::Error;

/// Errors raised across the numerical core and the coordination layers.
///
/// `Skip` is not a failure: it tells the caller that the device (or app)
/// has nothing to contribute this round and should abstain.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("registry error: {0}")]
    Registry(String),
    #[error("permission denied: {0}")]
    Permission(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("skipped: {0}")]
    Skip(String),
    #[error("storage error: {0}")]
    Storage(String),
}

impl Error {
    pub fn is_skip(&self) -> bool {
        matches!(self, Error::Skip(_))
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Storage(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Storage(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
