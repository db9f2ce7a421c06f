//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("context overflow: {0}")]
    ContextOverflow(String),
    #[error("policy is frozen: {0}")]
    FrozenPolicy(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("degenerate product of experts: normalizer {0:e} below threshold")]
    DegenerateProduct(f64),
    #[error("infinite KL divergence: {0}")]
    InfiniteKl(String),
    #[error("state error: {0}")]
    State(String),
    #[error("reward function failed: {0}")]
    Reward(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("reward outside declared codomain: {0}")]
    Codomain(String),
    #[error("empty evaluation set")]
    EmptyEvalSet,
    #[error("report mismatch: {0}")]
    Report(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for configuration problems, 3 for
    /// numerical aborts, 1 otherwise. Code 4 (acceptance regression) is
    /// produced by the `compare` subcommand, not by an error variant.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ConfigMismatch(_) | Error::Format(_) => 2,
            Error::Numerical(_) => 3,
            _ => 1,
        }
    }
}
