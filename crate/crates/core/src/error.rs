use std::io;

use thiserror::Error;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid configuration. `field` is the dotted path of the offending key
    /// when one is known.
    #[error("config error{}: {message}", field.as_deref().map(|f| format!(" at `{f}`")).unwrap_or_default())]
    Config {
        field: Option<String>,
        message: String,
    },

    #[error("format error{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Format {
        line: Option<usize>,
        message: String,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(message: impl Into<String>) -> Self {
        Error::Config {
            field: None,
            message: message.into(),
        }
    }

    pub fn config_field(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: Some(field.into()),
            message: message.into(),
        }
    }

    pub fn format(message: impl Into<String>) -> Self {
        Error::Format {
            line: None,
            message: message.into(),
        }
    }

    pub fn format_at(line: usize, message: impl Into<String>) -> Self {
        Error::Format {
            line: Some(line),
            message: message.into(),
        }
    }

    pub fn protocol(message: impl Into<String>) -> Self {
        Error::Protocol(message.into())
    }

    /// Process exit code for the CLI: 2 for configuration problems, 3 for
    /// data and format problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Format { .. } | Error::Io(_) => 3,
            _ => 1,
        }
    }
}
