//! Crate-wide error type.
//!
//! Every fallible operation returns one of these variants so callers (and the
//! CLI) can distinguish malformed inputs, corrupted files, and numeric faults.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// QPSK needs an even number of bits (two per symbol).
    #[error("bit count {0} is odd; QPSK consumes bits in pairs")]
    OddBitCount(usize),

    /// Equalizing by a coefficient this small would only amplify noise.
    #[error("degenerate channel: |h| = {0:.3e} is below the 1e-12 floor")]
    DegenerateChannel(f64),

    #[error("shape mismatch in {context}: expected {expected}, got {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// A forward pass produced a NaN or infinity.
    #[error("non-finite activation in layer `{layer}`")]
    NumericFault { layer: &'static str },

    #[error("{what} must be non-empty")]
    EmptySet { what: &'static str },

    /// Logistic regression cannot be fit when only one class is present.
    #[error("degenerate fit: all {n} samples carry the same label")]
    DegenerateFit { n: usize },

    #[error("cannot stratify {n} samples of one class into {folds} folds")]
    StratificationTooSmall { n: usize, folds: usize },

    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error("invalid cleansing history: {0}")]
    InvalidHistory(String),

    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },

    #[error("truncated file while reading {0}")]
    Truncated(&'static str),

    #[error("count mismatch for {what}: manifest/header says {expected}, payload has {found}")]
    CountMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("ensemble index {index} out of range for {len} submodels")]
    IndexOutOfRange { index: usize, len: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
