//! Error kinds shared across the crate.
//!
//! The CLI maps each variant family onto a distinct process exit code, so
//! keep contract violations, config problems, chain guards, numeric failures
//! and I/O failures in separate variants.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or argument contract violation between caller and callee.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An index (diffusion step, layer, frame) outside its valid range.
    #[error("range error: {0}")]
    Range(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Degenerate numeric input (zero-norm vector, empty set) that would
    /// silently poison a result if smoothed over.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Numeric failure at runtime (non-finite loss, non-PSD matrix, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Stage chaining guard: missing or mismatched upstream checkpoint.
    #[error("checkpoint chain error: {0}")]
    Chain(String),

    /// Manifest validation: missing file, malformed record, dangling path.
    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn range(msg: impl Into<String>) -> Self {
        Error::Range(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
