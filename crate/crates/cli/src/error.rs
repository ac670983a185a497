use thiserror::Error;

/// Failures grouped by the exit code they map to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<ringfed::Error> for CliError {
    fn from(e: ringfed::Error) -> Self {
        use ringfed::Error as E;
        match e {
            E::NonFinite(_) | E::Diverged { .. } => CliError::Numerical(e.to_string()),
            E::Io(_) | E::Checkpoint(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
