use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, a missing or invalid config, or missing inputs: nothing
    /// has been written.
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] structpose::Error),

    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    /// Machine-readable category reported on stderr.
    pub fn category(&self) -> &'static str {
        use structpose::Error as E;
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(E::Config(_)) => "config",
            CliError::Core(E::InvalidInput(_) | E::Shape { .. }) => "invalid_input",
            CliError::Core(E::NonFinite { .. }) => "non_finite",
            CliError::Core(E::Format(_)) => "format",
            CliError::Core(E::Io(_)) | CliError::Io { .. } => "io",
            CliError::Core(E::Json(_)) | CliError::Json(_) => "format",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "usage" | "config" => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
