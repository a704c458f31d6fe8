use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{0}")]
    Core(#[from] meda_core::Error),

    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    /// 3 for training divergence, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(meda_core::Error::TrainingDiverged { .. }) => 3,
            _ => 2,
        }
    }
}
