use thiserror::Error;

use crate::container::StreamKind;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the codec can report.
///
/// Variants split into two families: caller mistakes (bad sizes, mismatched
/// inputs) and data corruption (anything detected while reading a container,
/// archive or session stream). [`Error::is_corruption`] tells them apart.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input length {len} is not a multiple of the {element_bytes}-byte element size")]
    Size { len: usize, element_bytes: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("length mismatch: expected {expected} bytes, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("cannot build a codebook from an empty histogram")]
    EmptyHistogram,

    #[error("symbol 0x{0:02x} has no code in the codebook")]
    SymbolAbsent(u8),

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("corrupt {stream} stream, chunk {chunk}: {detail}")]
    CorruptChunk {
        stream: StreamKind,
        chunk: usize,
        detail: String,
    },

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),

    #[error("checksum mismatch in {stream} stream, chunk {chunk}")]
    Checksum { stream: StreamKind, chunk: usize },

    #[error("truncated input: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },

    #[error("chunk index {index} out of range ({count} chunks)")]
    OutOfRange { index: usize, count: usize },

    #[error("no {0} stream in container")]
    MissingStream(StreamKind),

    #[error("base checkpoint does not match the one this delta was built from")]
    BaseMismatch,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by damaged or malformed encoded data.
    pub fn is_corruption(&self) -> bool {
        matches!(
            self,
            Error::Corrupt(_)
                | Error::CorruptChunk { .. }
                | Error::BadMagic { .. }
                | Error::UnsupportedVersion(_)
                | Error::Checksum { .. }
                | Error::Truncated { .. }
                | Error::MissingStream(_)
                | Error::BaseMismatch
        )
    }
}
