use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// A configuration problem, located by a dotted field path such as `params.instances`.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("report bundle has no sections")]
    EmptyBundle,

    #[error(transparent)]
    Core(#[from] specshape::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
