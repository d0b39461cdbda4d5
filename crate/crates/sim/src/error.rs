use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("config error: {0}")]
    Config(String),
    #[error("network error: {0}")]
    Network(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl SimError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            SimError::Config(_) => 2,
            SimError::Network(_) => 3,
            SimError::Protocol(_) => 4,
            SimError::Io(_) => 1,
        })
    }
}

impl From<flaas_core::Error> for SimError {
    fn from(e: flaas_core::Error) -> Self {
        match e {
            flaas_core::Error::Config(m) => SimError::Config(m),
            other => SimError::Protocol(other.to_string()),
        }
    }
}
