use std::fmt;

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for the attempted operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A value left the numeric domain of an operation (log of a
    /// nonpositive value, division by zero, ...).
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    /// An argument violated a precondition (axis out of range, label out
    /// of range, empty input, ...).
    InvalidArgument(String),
    /// A non-finite value reached a point where it must not be (loss,
    /// parameter update).
    NonFinite { context: String },
    /// Training diverged; the step index of the first non-finite loss.
    Divergence { step: usize },
    /// I/O failure while reading or writing an artifact file.
    Io(String),
    /// A container file failed validation.
    Format(FormatError),
}

/// Distinct dataset/checkpoint container failures.
#[derive(Debug, Clone, PartialEq)]
pub enum FormatError {
    /// Stored CRC-32 does not match the blob section.
    ChecksumMismatch { stored: u32, computed: u32 },
    /// File declares an unsupported format version.
    VersionMismatch { found: u32, supported: u32 },
    /// Blob section is shorter than the header declares.
    TruncatedBlob { field: String, expected: usize, actual: usize },
    /// Header is not valid JSON or is missing fields.
    BadHeader(String),
    /// Magic bytes do not identify an EDRL container.
    BadMagic,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Error::Domain { op, index, value } => {
                write!(f, "{op}: domain violation at index {index} (value {value})")
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::Divergence { step } => {
                write!(f, "training diverged: non-finite loss at step {step}")
            }
            Error::Io(msg) => write!(f, "i/o error: {msg}"),
            Error::Format(e) => write!(f, "container format error: {e}"),
        }
    }
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatError::ChecksumMismatch { stored, computed } => write!(
                f,
                "checksum mismatch: header says {stored:#010x}, blob section is {computed:#010x}"
            ),
            FormatError::VersionMismatch { found, supported } => write!(
                f,
                "format version {found} is not supported (this build reads version {supported})"
            ),
            FormatError::TruncatedBlob { field, expected, actual } => write!(
                f,
                "blob `{field}` truncated: expected {expected} bytes, found {actual}"
            ),
            FormatError::BadHeader(msg) => write!(f, "bad header: {msg}"),
            FormatError::BadMagic => write!(f, "not an EDRL container file"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
