//! Error taxonomy shared by every module, aligned with the process exit
//! codes: configuration problems exit 2, data problems exit 3, numerical
//! aborts exit 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KoopmanError {
    /// Invalid configuration: bad flag combinations, malformed config files,
    /// out-of-range hyperparameters.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid or unreadable data: corrupt corpus containers, shape
    /// mismatches, missing files, unwritable outputs.
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure: solver blow-up, non-finite losses, non-finite
    /// states mid-rollout.
    #[error("numerical error: {0}")]
    Numerical(String),
}

impl KoopmanError {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            KoopmanError::Config(_) => 2,
            KoopmanError::Data(_) => 3,
            KoopmanError::Numerical(_) => 4,
        }
    }
}

impl From<std::io::Error> for KoopmanError {
    fn from(e: std::io::Error) -> Self {
        KoopmanError::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, KoopmanError>;
