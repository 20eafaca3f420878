//! Error type shared by all core modules.

use alloc::string::String;
use core::fmt;

/// Errors raised by the simulation core.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Invalid configuration value (dimensions, counts, ranges).
    Config(String),
    /// Operands with incompatible shapes or lengths.
    Shape(String),
    /// Input outside an operation's domain (empty batch, too few clouds).
    Domain(String),
    /// A user's devices share no common timestamps.
    Alignment(String),
    /// A (user, class) pair has too few windows to partition.
    Partition(String),
    /// A device has too few windows to split.
    Split(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Alignment(msg) => write!(f, "alignment error: {msg}"),
            Error::Partition(msg) => write!(f, "partition error: {msg}"),
            Error::Split(msg) => write!(f, "split error: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
