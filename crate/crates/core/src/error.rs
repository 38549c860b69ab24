//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by tensor plumbing, the forward model, the networks and
/// the trainer. Validation-style variants (bad spec, bad file, bad config)
/// are distinguished from runtime failures so the CLI can map them to exit
/// codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("infeasible acceleration: {0}")]
    InfeasibleAcceleration(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("state error: {0}")]
    State(String),
    #[error("malformed DMT4 file: {0}")]
    Dmt4(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by invalid user input (bad flags, bad specs,
    /// malformed files) as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidSpec(_)
                | Error::InfeasibleAcceleration(_)
                | Error::Config(_)
                | Error::Size(_)
                | Error::Dmt4(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
