//! Structured pruning masks, bit-exact sparse weight containers, and the
//! metrics and decoder models used to compare them.
//!
//! The pipeline mirrors how the pieces are used from the `darbkit` CLI:
//! synthesize or load a dense [`WeightMatrix`], derive a [`PruneMask`] with
//! one of the generators in [`pruning`], encode the retained weights with
//! [`formats`], then measure with [`analysis`] and [`decoder_sim`].

pub mod analysis;
pub mod bits;
pub mod cli;
pub mod decoder_sim;
pub mod error;
pub mod formats;
pub mod pruning;
pub mod report;
pub mod tensor_io;
mod wire;

pub use error::{Error, Result};
pub use formats::{AnyContainer, FormatKind, SparseContainer};
pub use pruning::{BlockSizePlan, DensitySummary, EmptyRowPolicy};
pub use tensor_io::{PruneMask, RowDensity, WeightDist, WeightMatrix};
