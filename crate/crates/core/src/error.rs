use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied data that violates an operation's preconditions.
    #[error("rejected input: {0}")]
    InvalidInput(String),

    /// A NaN or infinity appeared. `layer` is set when the failure happened
    /// inside an MLP pass.
    #[error("numerical failure in {what}{}", .layer.map(|l| format!(" (layer {l})")).unwrap_or_default())]
    Numerical { what: String, layer: Option<usize> },

    /// A buffer had nothing to sample from.
    #[error("no data available: {0}")]
    Unavailable(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn numerical(what: impl Into<String>) -> Self {
        Error::Numerical {
            what: what.into(),
            layer: None,
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
