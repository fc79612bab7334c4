use goweb::GowebError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Missing(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Core(GowebError),
}

impl From<GowebError> for CliError {
    fn from(e: GowebError) -> Self {
        match e {
            GowebError::Config(msg) => CliError::Config(msg),
            GowebError::Numerical(msg) => CliError::Numerical(msg),
            GowebError::Io { ref source, ref path } if source.kind() == std::io::ErrorKind::NotFound => {
                CliError::Missing(format!("input not found: {}", path.display()))
            }
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Missing(_) => 2,
            CliError::Config(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Core(_) => 1,
        }
    }
}
