//! Encoded sparse weight containers and SpMV executed directly on them.
//!
//! Three bit-exact layouts are provided:
//!
//! * [`RelCsrContainer`] (`DRCS`): per-row zero-gap indices of fixed width
//!   with padding entries for long gaps.
//! * [`DarbContainer`] (`DARB`): per-row block-offset indices of
//!   `log2(block)` bits, packed LSB-first and byte-aligned per row.
//! * [`BlockCoordContainer`] (`DBLK`): retained tiles as coordinate pairs
//!   followed by their dense payload.
//!
//! For every format `decode(encode(m, ..)) == apply_mask(m, mask)` bit for
//! bit, and `spmv` accumulates each row in ascending column order in f64.

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor_io::WeightMatrix;

mod block;
mod darb;
mod relcsr;

pub use block::{block_decode, block_encode, BlockCoordContainer, Tile, BLOCK_MAGIC};
pub use darb::{darb_decode, darb_encode, DarbContainer, DarbRow, DARB_MAGIC};
pub use relcsr::{
    rcsr_decode, rcsr_encode, RelCsrContainer, RelCsrEntry, DEFAULT_GAP_BITS, RCSR_MAGIC,
};

pub const CONTAINER_VERSION: u16 = 1;

/// Common surface of the encoded containers.
pub trait SparseContainer {
    fn kind(&self) -> FormatKind;

    fn shape(&self) -> (usize, usize);

    /// Dense reconstruction; pruned positions are `+0.0`.
    fn decode(&self) -> Result<WeightMatrix>;

    /// `y = W x` over the stored weights, ascending column order per row.
    fn spmv(&self, x: &[f32]) -> Result<Vec<f64>>;

    /// Weights the container represents as retained.
    fn retained(&self) -> usize;

    /// Weight slots physically stored, including any padding entries.
    fn stored_weights(&self) -> usize;

    /// Number of stored index records.
    fn index_count(&self) -> usize;

    /// Index payload size in bits, excluding alignment padding.
    fn index_bits(&self) -> usize;

    /// Index payload size in bytes as laid out in the encoded stream.
    fn index_bytes(&self) -> usize;

    fn to_bytes(&self) -> Result<Vec<u8>>;
}

/// Validates an activation vector against `cols`.
pub(crate) fn check_activations(x: &[f32], cols: usize, rows: usize) -> Result<()> {
    if x.len() != cols {
        return Err(Error::shape((rows, cols), (x.len(), 1)));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(
            "activation vector has non-finite entries".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatKind {
    RelCsr,
    Darb,
    Block,
}

impl FormatKind {
    pub const ALL: [FormatKind; 3] = [FormatKind::RelCsr, FormatKind::Darb, FormatKind::Block];

    pub fn name(self) -> &'static str {
        match self {
            FormatKind::RelCsr => "rcsr",
            FormatKind::Darb => "darb",
            FormatKind::Block => "block",
        }
    }
}

impl fmt::Display for FormatKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FormatKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rcsr" | "relcsr" => Ok(FormatKind::RelCsr),
            "darb" => Ok(FormatKind::Darb),
            "block" | "blk" => Ok(FormatKind::Block),
            _ => Err(Error::InvalidParameter(format!("unknown format {s:?}"))),
        }
    }
}

/// Any of the three containers, dispatched on the file magic.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyContainer {
    RelCsr(RelCsrContainer),
    Darb(DarbContainer),
    Block(BlockCoordContainer),
}

impl AnyContainer {
    fn inner(&self) -> &dyn SparseContainer {
        match self {
            AnyContainer::RelCsr(c) => c,
            AnyContainer::Darb(c) => c,
            AnyContainer::Block(c) => c,
        }
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let magic: [u8; 4] = buf
            .get(..4)
            .ok_or(Error::TruncatedPayload {
                needed: 4,
                available: buf.len(),
            })?
            .try_into()
            .unwrap();
        match &magic {
            RCSR_MAGIC => RelCsrContainer::from_bytes(buf).map(AnyContainer::RelCsr),
            DARB_MAGIC => DarbContainer::from_bytes(buf).map(AnyContainer::Darb),
            BLOCK_MAGIC => BlockCoordContainer::from_bytes(buf).map(AnyContainer::Block),
            _ => Err(Error::BadMagic {
                expected: *RCSR_MAGIC,
                found: magic,
            }),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

impl SparseContainer for AnyContainer {
    fn kind(&self) -> FormatKind {
        self.inner().kind()
    }
    fn shape(&self) -> (usize, usize) {
        self.inner().shape()
    }
    fn decode(&self) -> Result<WeightMatrix> {
        self.inner().decode()
    }
    fn spmv(&self, x: &[f32]) -> Result<Vec<f64>> {
        self.inner().spmv(x)
    }
    fn retained(&self) -> usize {
        self.inner().retained()
    }
    fn stored_weights(&self) -> usize {
        self.inner().stored_weights()
    }
    fn index_count(&self) -> usize {
        self.inner().index_count()
    }
    fn index_bits(&self) -> usize {
        self.inner().index_bits()
    }
    fn index_bytes(&self) -> usize {
        self.inner().index_bytes()
    }
    fn to_bytes(&self) -> Result<Vec<u8>> {
        self.inner().to_bytes()
    }
}

impl From<RelCsrContainer> for AnyContainer {
    fn from(c: RelCsrContainer) -> Self {
        AnyContainer::RelCsr(c)
    }
}

impl From<DarbContainer> for AnyContainer {
    fn from(c: DarbContainer) -> Self {
        AnyContainer::Darb(c)
    }
}

impl From<BlockCoordContainer> for AnyContainer {
    fn from(c: BlockCoordContainer) -> Self {
        AnyContainer::Block(c)
    }
}

/// Dense `y = W x` in ascending column order, the reference for `spmv`.
pub fn dense_matvec(m: &WeightMatrix, x: &[f32]) -> Result<Vec<f64>> {
    check_activations(x, m.cols(), m.rows())?;
    Ok((0..m.rows())
        .map(|r| {
            m.row(r)
                .iter()
                .zip(x)
                .fold(0.0f64, |acc, (&w, &xi)| acc + w as f64 * xi as f64)
        })
        .collect())
}

pub fn spmv(c: &dyn SparseContainer, x: &[f32]) -> Result<Vec<f64>> {
    c.spmv(x)
}

/// First row where `|y - y_ref| > rtol * |y_ref|`, or where lengths differ.
/// A zero reference requires an exactly zero result.
pub fn first_spmv_violation(y: &[f64], y_ref: &[f64], rtol: f64) -> Option<usize> {
    if let Some(i) = y.iter().zip(y_ref).position(|(&a, &b)| {
        !matches!(
            (a - b).abs().partial_cmp(&(rtol * b.abs())),
            Some(Ordering::Less | Ordering::Equal)
        )
    }) {
        return Some(i);
    }
    (y.len() != y_ref.len()).then(|| y.len().min(y_ref.len()))
}
