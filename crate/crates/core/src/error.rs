use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by front-ends to choose an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad configuration or arguments supplied by the caller.
    Usage,
    /// Missing, malformed or inconsistent input data.
    Data,
    /// A numeric audit refused to run a computation.
    NumericAudit,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value {value} at index {index} in {context}")]
    NonFinite {
        context: &'static str,
        index: usize,
        value: f32,
    },

    #[error("invalid quantization scheme: {0}")]
    InvalidScheme(String),

    #[error("wrong scheme: expected {expected}, got {got}")]
    WrongScheme { expected: &'static str, got: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("uncalibrated observer{}", site_suffix(.0))]
    Uncalibrated(Option<String>),

    #[error(
        "accumulator overflow audit failed: {input_bits} input bits + {shift_span} shift span + {reduction_bits} reduction bits > 62"
    )]
    AccumulatorOverflow {
        input_bits: u32,
        shift_span: u32,
        reduction_bits: u32,
    },

    #[error("token id {token} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },

    #[error("sequence of length {len} exceeds block size {block_size}")]
    SequenceTooLong { len: usize, block_size: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("byte count mismatch: {0}")]
    ByteCount(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("cannot parse quantization spec {input:?}: {reason}")]
    SpecParse { input: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn site_suffix(site: &Option<String>) -> String {
    match site {
        Some(name) => format!(" at site `{name}`"),
        None => String::new(),
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidScheme(_)
            | Error::WrongScheme { .. }
            | Error::InvalidConfig(_)
            | Error::SpecParse { .. } => ErrorCategory::Usage,
            Error::AccumulatorOverflow { .. } | Error::NonFinite { .. } => {
                ErrorCategory::NumericAudit
            }
            _ => ErrorCategory::Data,
        }
    }
}
