use thiserror::Error;

/// Errors raised across the library and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid shape parameters, hyperparameters or experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Out-of-range agent or action index, shape mismatch, malformed prefix.
    #[error("domain error: {0}")]
    Domain(String),
    /// Non-finite or otherwise unusable data (rewards, advantages).
    #[error("data error: {0}")]
    Data(String),
    /// The requested computation is not available at this problem size.
    #[error("capability error: {0}")]
    Capability(String),
    /// A real-environment budget would be exceeded.
    #[error("budget error: {0}")]
    Budget(String),
    /// A numeric guard tripped (zero probability, failed factorization).
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 for configuration problems, 3 for
    /// budget and capability limits, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Budget(_) | Error::Capability(_) => 3,
            _ => 1,
        }
    }
}
