use alloc::string::String;
use core::fmt;

/// Errors raised by the core crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor or slice shapes do not conform.
    Dimension(String),
    /// An argument is outside its admissible range.
    Argument(String),
    /// A configuration cannot be satisfied (detected before training).
    Config(String),
    /// An operation was invoked in the wrong order (e.g. prototypes not ready).
    Sequencing(String),
    /// A value became NaN or infinite.
    NonFinite(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Error::Argument(msg) => write!(f, "argument error: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Sequencing(msg) => write!(f, "sequencing error: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
