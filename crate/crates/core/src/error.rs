use alloc::string::String;
use core::fmt;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two objects that must share a grid or a shape do not.
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    /// A parameter is outside its admissible range.
    Parameter(String),
    /// A non-finite value was produced or supplied.
    Numeric(String),
    /// The requested operation is not offered for this variant.
    Capability(String),
    /// An inconsistent configuration.
    Config(String),
    /// The quantity is undefined for the given arguments (e.g. an inf over an empty set).
    Undefined(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension {
                context,
                expected,
                found,
            } => write!(f, "dimension mismatch in {context}: expected {expected}, found {found}"),
            Error::Parameter(msg) => write!(f, "invalid parameter: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Capability(msg) => write!(f, "unsupported: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Undefined(msg) => write!(f, "undefined: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            found,
        })
    }
}
