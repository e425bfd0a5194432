use thiserror::Error;

/// Harness errors; [`CliError::exit_code`] is the scripting contract.
#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] xlmimo_core::Error),

    #[error("configuration error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{0}")]
    Usage(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// 0 success, 2 configuration, 3 numerical abort, 4 infeasible instance, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use xlmimo_core::Error as E;
        match self {
            CliError::Config { .. } | CliError::Parse(_) => 2,
            CliError::Core(E::Config { .. }) => 2,
            CliError::Core(E::Numerical(_)) => 3,
            CliError::Core(E::Infeasible(_)) => 4,
            _ => 1,
        }
    }
}
