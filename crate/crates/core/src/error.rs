//! Error taxonomy shared across the toolkit.
//!
//! Variants map onto process exit codes: configuration problems exit 2,
//! data problems exit 3, numerical failures exit 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad hyperparameter, malformed MDP, bad CLI input.
    #[error("config error: {0}")]
    Config(String),

    /// An upstream artifact is missing; names the subcommand that produces it.
    #[error("dependency error: {0}")]
    Dependency(String),

    /// API misuse: empty history, stale cache, k larger than the index.
    #[error("usage error: {0}")]
    Usage(String),

    /// Bad data content: negative value in a log feature, single-class labels.
    #[error("data error: {0}")]
    Data(String),

    /// Structural mismatch between data and the expected schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Numerical failure: divergence, NaN gradients, degenerate weights.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dependency(_) | Error::Usage(_) | Error::Io(_) => 2,
            Error::Data(_) | Error::Schema(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}
