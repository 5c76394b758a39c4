use thiserror::Error;

/// Command failure, classified by process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Verification(_) => 5,
        }
    }
}

impl From<wavecast::Error> for CliError {
    fn from(e: wavecast::Error) -> Self {
        use wavecast::Error as E;
        let msg = e.to_string();
        match e {
            E::Argument(_) | E::Capability(_) => CliError::Config(msg),
            E::Numeric(_) => CliError::Numeric(msg),
            E::Integrity(_) => CliError::Verification(msg),
            E::Format(_) | E::Generation(_) | E::Metric(_) | E::Io { .. } => CliError::Data(msg),
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}
