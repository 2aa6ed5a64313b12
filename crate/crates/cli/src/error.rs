use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A check ran to completion and failed.
    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Core(#[from] midetr::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(midetr::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}
