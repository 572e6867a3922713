//! Crate-wide error type.
//!
//! Every fallible public API in this crate returns [`Result`]. The variants
//! are coarse on purpose: callers almost always either propagate the error or
//! map it onto a process exit code, so what matters is the category and a
//! human-readable message, not a deep structured payload.

use std::fmt;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All errors produced by this crate.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes are incompatible with the requested operation.
    Shape(String),
    /// An API contract was violated (bad argument, wrong mode, missing key).
    Contract(String),
    /// A configuration value is out of its documented range.
    Config(String),
    /// Stored data (manifest, weight table, checkpoint, image) is malformed
    /// or inconsistent with the current configuration.
    Data(String),
    /// A sampler or generator ran out of material and cannot make progress.
    Exhausted(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// Image encoding/decoding failure.
    Image(image::ImageError),
}

impl Error {
    /// Short machine-friendly category tag, used in log lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Exhausted(_) => "exhausted",
            Error::Io(_) => "io",
            Error::Image(_) => "image",
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Exhausted(msg) => write!(f, "exhausted: {msg}"),
            Error::Io(err) => write!(f, "i/o error: {err}"),
            Error::Image(err) => write!(f, "image error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            Error::Image(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

impl From<image::ImageError> for Error {
    fn from(err: image::ImageError) -> Self {
        Error::Image(err)
    }
}
