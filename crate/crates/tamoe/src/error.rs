//! Error type shared across the crate.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by tensor ops, model assembly, training, and the
/// experiment harness.
#[derive(Debug)]
pub enum Error {
    /// Shape or dimension mismatch; the message names both shapes.
    Shape(String),
    /// Invalid configuration (bad key, out-of-range value, impossible combo).
    Config(String),
    /// An API contract was violated (non-scalar loss, wrong sublayer kind, ...).
    Contract(String),
    /// A reduction over an empty selection (all-zero mask, no records).
    EmptyReduction(String),
    /// An index outside its valid range (token id, expert id, group label).
    IndexOutOfRange(String),
    /// Non-finite value detected where the pipeline requires finite math.
    Numeric(String),
    /// Failure parsing a config file, dataset record, or checkpoint.
    Parse(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::EmptyReduction(m) => write!(f, "empty reduction: {m}"),
            Error::IndexOutOfRange(m) => write!(f, "index out of range: {m}"),
            Error::Numeric(m) => write!(f, "numeric failure: {m}"),
            Error::Parse(m) => write!(f, "parse error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl Error {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse(_) => 2,
            Error::Numeric(_) => 3,
            _ => 1,
        }
    }
}
