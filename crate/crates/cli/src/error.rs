use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, configuration values or missing inputs.
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing input {}: {what}", path.display())]
    MissingInput { what: String, path: PathBuf },
    #[error(transparent)]
    Core(#[from] menisc_core::Error),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// 1 for configuration problems, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::MissingInput { .. } | Self::Core(menisc_core::Error::Config(_)) => 1,
            Self::Core(_) | Self::Runtime(_) => 2,
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Core(e.into())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub(crate) fn require(path: &std::path::Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput { what: what.into(), path: path.to_path_buf() })
    }
}
