use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised across the crate.
///
/// Each variant maps onto a stable category string (see [`Error::category`])
/// that the command-line front end prints on failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Numerical(_) => "numerical",
            Error::Internal(_) => "internal",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }

    /// Message without the category prefix.
    pub fn detail(&self) -> String {
        match self {
            Error::Shape(m)
            | Error::Config(m)
            | Error::Data(m)
            | Error::Numerical(m)
            | Error::Internal(m)
            | Error::Format(m) => m.clone(),
            Error::Io(e) => e.to_string(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use shape_err;
