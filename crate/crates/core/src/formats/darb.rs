//! DARB container: every non-dropped row stores one weight per block and
//! that weight's offset inside the block in `log2(b_r)` bits.
//!
//! File layout (`DARB`): magic | version u16 | rows u32 | cols u32 |
//! embedded `DPLN` plan | per non-dropped row: ceil(blocks * log2(b_r) / 8)
//! index bytes (LSB-first), then `blocks` little-endian f32 weights.

use crate::bits::{BitReader, BitWriter};
use crate::error::{Error, Result};
use crate::pruning::{row_block_maxima, BlockSizePlan};
use crate::tensor_io::WeightMatrix;
use crate::wire::{dim_u32, ByteReader, ByteWriter};
use rayon::prelude::*;

use super::{check_activations, FormatKind, SparseContainer, CONTAINER_VERSION};

pub const DARB_MAGIC: &[u8; 4] = b"DARB";

/// Encoded stream of one row. Empty for dropped rows.
#[derive(Debug, Clone, Default)]
pub struct DarbRow {
    pub indices: Vec<u8>,
    pub weights: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct DarbContainer {
    rows: usize,
    cols: usize,
    plan: BlockSizePlan,
    row_data: Vec<DarbRow>,
}

impl PartialEq for DarbContainer {
    fn eq(&self, other: &Self) -> bool {
        self.plan == other.plan
            && self.row_data.len() == other.row_data.len()
            && self.row_data.iter().zip(&other.row_data).all(|(a, b)| {
                a.indices == b.indices
                    && a.weights.len() == b.weights.len()
                    && a.weights
                        .iter()
                        .zip(&b.weights)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

impl DarbContainer {
    /// Assembles a container, checking stream lengths against the plan.
    /// Offsets are validated when decoding.
    pub fn from_parts(plan: BlockSizePlan, row_data: Vec<DarbRow>) -> Result<Self> {
        if row_data.len() != plan.rows() {
            return Err(Error::CorruptStream(format!(
                "{} row streams for {} rows",
                row_data.len(),
                plan.rows()
            )));
        }
        for (r, row) in row_data.iter().enumerate() {
            let blocks = plan.blocks_in_row(r);
            let index_bytes = plan.row_index_bits(r).div_ceil(8);
            if row.weights.len() != blocks || row.indices.len() != index_bytes {
                return Err(Error::CorruptStream(format!(
                    "row {r}: expected {blocks} weights and {index_bytes} index bytes, found {} and {}",
                    row.weights.len(),
                    row.indices.len()
                )));
            }
        }
        Ok(DarbContainer {
            rows: plan.rows(),
            cols: plan.cols(),
            plan,
            row_data,
        })
    }

    pub fn plan(&self) -> &BlockSizePlan {
        &self.plan
    }

    pub fn row(&self, r: usize) -> &DarbRow {
        &self.row_data[r]
    }

    /// Block offsets of row `r`, each checked against its block's length.
    pub fn row_offsets(&self, r: usize) -> Result<Vec<usize>> {
        let Some(b) = self.plan.block_size(r) else {
            return Ok(Vec::new());
        };
        let width = self.plan.index_width(r).unwrap_or(0);
        let mut bits = BitReader::new(&self.row_data[r].indices);
        (0..self.plan.blocks_in_row(r))
            .map(|blk| {
                let off = bits.read(width).ok_or_else(|| {
                    Error::CorruptStream(format!("row {r}: index stream ends early"))
                })? as usize;
                let len = b.min(self.cols - blk * b);
                if off >= len {
                    return Err(Error::CorruptStream(format!(
                        "row {r} block {blk}: offset {off} outside block of length {len}"
                    )));
                }
                Ok(off)
            })
            .collect()
    }

    /// Decoded `(column, weight)` pairs of row `r` in ascending column order.
    pub fn row_positions(&self, r: usize) -> Result<Vec<(usize, f32)>> {
        let b = self.plan.block_size(r).unwrap_or(1);
        let offsets = self.row_offsets(r)?;
        Ok(offsets
            .into_iter()
            .zip(&self.row_data[r].weights)
            .enumerate()
            .map(|(blk, (off, &w))| (blk * b + off, w))
            .collect())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut rd = ByteReader::new(buf);
        rd.magic(DARB_MAGIC)?;
        rd.version(CONTAINER_VERSION)?;
        let rows = rd.u32()? as usize;
        let cols = rd.u32()? as usize;
        let plan = BlockSizePlan::read(&mut rd)?;
        if (plan.rows(), plan.cols()) != (rows, cols) {
            return Err(Error::CorruptStream(format!(
                "embedded plan is {}x{}, container is {rows}x{cols}",
                plan.rows(),
                plan.cols()
            )));
        }
        let mut row_data = Vec::with_capacity(rows);
        for r in 0..rows {
            if plan.is_dropped(r) {
                row_data.push(DarbRow::default());
                continue;
            }
            let indices = rd.take(plan.row_index_bits(r).div_ceil(8))?.to_vec();
            let weights = rd.f32s(plan.blocks_in_row(r))?;
            if weights.iter().any(|w| !w.is_finite()) {
                return Err(Error::CorruptStream(format!("row {r}: non-finite weight")));
            }
            row_data.push(DarbRow { indices, weights });
        }
        rd.finish()?;
        Self::from_parts(plan, row_data)
    }
}

/// Encodes `m` under `plan`: per row, the block maxima of the original weights.
pub fn darb_encode(m: &WeightMatrix, plan: &BlockSizePlan) -> Result<DarbContainer> {
    plan.ensure_matches(m)?;
    let row_data = (0..m.rows())
        .map(|r| {
            let (Some(b), Some(width)) = (plan.block_size(r), plan.index_width(r)) else {
                return DarbRow::default();
            };
            let row = m.row(r);
            let mut bits = BitWriter::with_capacity_bits(plan.row_index_bits(r));
            let mut weights = Vec::with_capacity(plan.blocks_in_row(r));
            for (blk, c) in row_block_maxima(row, b).enumerate() {
                bits.push((c - blk * b) as u32, width);
                weights.push(row[c]);
            }
            DarbRow {
                indices: bits.into_bytes(),
                weights,
            }
        })
        .collect();
    DarbContainer::from_parts(plan.clone(), row_data)
}

pub fn darb_decode(c: &DarbContainer) -> Result<WeightMatrix> {
    let mut data = vec![0.0f32; c.rows * c.cols];
    for r in 0..c.rows {
        for (col, w) in c.row_positions(r)? {
            data[r * c.cols + col] = w;
        }
    }
    WeightMatrix::new(c.rows, c.cols, data)
}

impl SparseContainer for DarbContainer {
    fn kind(&self) -> FormatKind {
        FormatKind::Darb
    }

    fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn decode(&self) -> Result<WeightMatrix> {
        darb_decode(self)
    }

    fn spmv(&self, x: &[f32]) -> Result<Vec<f64>> {
        check_activations(x, self.cols, self.rows)?;
        (0..self.rows)
            .into_par_iter()
            .map(|r| {
                Ok(self
                    .row_positions(r)?
                    .into_iter()
                    .fold(0.0f64, |acc, (c, w)| acc + w as f64 * x[c] as f64))
            })
            .collect()
    }

    fn retained(&self) -> usize {
        self.plan.retained_count()
    }

    fn stored_weights(&self) -> usize {
        self.plan.retained_count()
    }

    fn index_count(&self) -> usize {
        self.plan.retained_count()
    }

    fn index_bits(&self) -> usize {
        self.plan.index_bits()
    }

    fn index_bytes(&self) -> usize {
        self.row_data.iter().map(|r| r.indices.len()).sum()
    }

    fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::with_capacity(
            29 + self.rows + self.index_bytes() + 4 * self.stored_weights(),
        );
        w.bytes(DARB_MAGIC)
            .u16(CONTAINER_VERSION)
            .u32(dim_u32(self.rows)?)
            .u32(dim_u32(self.cols)?);
        self.plan.write(&mut w)?;
        for (r, row) in self.row_data.iter().enumerate() {
            if !self.plan.is_dropped(r) {
                w.bytes(&row.indices).f32s(&row.weights);
            }
        }
        Ok(w.into_inner())
    }
}
