use std::io;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// Each variant maps onto one process exit code via [`Error::exit_code`]:
/// precondition and usage problems are `2`, damaged or malformed data is `3`.
#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { expected: u16, found: u16 },

    #[error("truncated payload: needed {needed} bytes, {available} available")]
    TruncatedPayload { needed: usize, available: usize },

    #[error("non-finite weight at element {index}")]
    NonFiniteWeight { index: usize },

    #[error("degenerate shape {rows}x{cols}")]
    DegenerateShape { rows: usize, cols: usize },

    #[error("shape mismatch: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    ShapeMismatch {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("bad distribution parameters: {0}")]
    BadDistribution(String),

    #[error("mask would retain no weights")]
    EmptyMask,

    #[error("block size {block} exceeds row length {cols}")]
    BlockTooLarge { block: usize, cols: usize },

    #[error("corrupt stream: {0}")]
    CorruptStream(String),

    #[error("no empty blocks in mask")]
    NoEmptyBlocks,

    #[error("no blocks with more than one retained weight")]
    NoMultiBlocks,

    #[error("cannot split {rows} rows into two halves")]
    DegenerateSplit { rows: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("malformed config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(left: (usize, usize), right: (usize, usize)) -> Self {
        Error::ShapeMismatch {
            left_rows: left.0,
            left_cols: left.1,
            right_rows: right.0,
            right_cols: right.1,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::BadMagic { .. }
            | Error::VersionMismatch { .. }
            | Error::TruncatedPayload { .. }
            | Error::NonFiniteWeight { .. }
            | Error::CorruptStream(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
