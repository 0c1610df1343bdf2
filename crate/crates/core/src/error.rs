use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid shapes, hyperparameters or network descriptions.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    /// Non-finite loss or gradient during optimization.
    #[error("training error: {0}")]
    Training(String),

    #[error("numeric domain error: {0}")]
    Domain(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
