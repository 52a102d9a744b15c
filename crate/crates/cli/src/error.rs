use std::path::PathBuf;

use rethead_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("config version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: String },

    #[error("{stage} is missing its inputs: run {need} first")]
    MissingPrereq {
        stage: &'static str,
        need: &'static str,
    },

    #[error("{0} holds results from different inputs; pass --force to overwrite")]
    Dirty(PathBuf),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Process exit status: 2 config, 3 missing prerequisite, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Version { .. } | CliError::Dirty(_) => 2,
            CliError::MissingPrereq { .. } => 3,
            CliError::Core(CoreError::Diverged { .. }) => 4,
            CliError::Core(CoreError::InvalidConfig(_)) => 2,
            _ => 1,
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
