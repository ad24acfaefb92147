//! Crate-wide error type.
//!
//! Every fallible operation in the library funnels into [`Error`]. Variants
//! carry enough structure that a failure deep inside a training loop can name
//! the kernel, parameter, or artifact that caused it.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor kernel was called with incompatible shapes. `detail` spells
    /// out the offending dimensions.
    #[error("shape mismatch in kernel `{kernel}`: {detail}")]
    ShapeMismatch { kernel: String, detail: String },

    /// `backward` was called on a tensor that is not a scalar.
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// An optimizer step saw a NaN or infinite gradient.
    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGrad { param: String },

    /// A forward pass was asked to process a sequence longer than the
    /// model's context window.
    #[error("sequence length {len} exceeds context length {max}")]
    ContextOverflow { len: usize, max: usize },

    /// Two models that must share a vocabulary do not.
    #[error("vocabulary mismatch: {left} vs {right}")]
    VocabMismatch { left: usize, right: usize },

    /// A byte is not part of the task alphabet.
    #[error("cannot tokenize byte {byte:#04x} ({})", *.byte as char)]
    UnknownSymbol { byte: u8 },

    /// A problem or config value is outside its documented domain.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A stage needs an artifact that a previous stage has not produced.
    #[error("missing artifact `{path}`; run `{produced_by}` first")]
    MissingArtifact { path: String, produced_by: String },

    /// Several required artifacts are missing at once; the string lists
    /// each path with the subcommand that produces it.
    #[error("missing artifacts:\n{0}")]
    MissingArtifacts(String),

    /// An artifact file exists but cannot be decoded.
    #[error("malformed artifact `{path}`: {detail}")]
    MalformedArtifact { path: String, detail: String },

    /// An artifact was written by an incompatible version of this crate.
    #[error("artifact `{path}` has format version {found}, expected {expected}")]
    FormatVersion {
        path: String,
        found: u32,
        expected: u32,
    },

    /// Training produced a state it cannot proceed from (e.g. a NaN loss or
    /// an empty retained problem set).
    #[error("training failed: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(kernel: &str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            kernel: kernel.to_string(),
            detail: detail.into(),
        }
    }
}
