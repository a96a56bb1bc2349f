//! Crate-wide error type.

use std::fmt;
use std::io;

/// Convenient result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong inside the library.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes that do not line up for the requested operation.
    ShapeMismatch { op: &'static str, expected: Vec<usize>, got: Vec<usize> },
    /// A caller violated a documented precondition.
    Contract(String),
    /// A numeric quantity left the finite range (NaN or infinity).
    NonFinite { context: String },
    /// Failure while reading or writing files.
    Io(io::Error),
    /// Malformed input data; `offset` is the byte position where parsing failed.
    Parse { path: String, offset: u64, message: String },
    /// A checkpoint whose stored checksum does not match its payload.
    ChecksumMismatch { expected: u32, got: u32 },
    /// A checkpoint written by an incompatible format version.
    VersionMismatch { expected: u32, got: u32 },
    /// A checkpoint file that ends before its declared payload does.
    Truncated { expected_len: u64, got_len: u64 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, expected, got } => {
                write!(f, "shape mismatch in {op}: expected {expected:?}, got {got:?}")
            }
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
            Error::Parse { path, offset, message } => {
                write!(f, "parse error in {path} at byte {offset}: {message}")
            }
            Error::ChecksumMismatch { expected, got } => {
                write!(f, "checkpoint checksum mismatch: manifest says {expected:#010x}, payload hashes to {got:#010x}")
            }
            Error::VersionMismatch { expected, got } => {
                write!(f, "checkpoint version mismatch: this build reads version {expected}, file is version {got}")
            }
            Error::Truncated { expected_len, got_len } => {
                write!(f, "checkpoint truncated: expected {expected_len} bytes, file has {got_len}")
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

impl Error {
    /// Build a contract violation from anything printable.
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
