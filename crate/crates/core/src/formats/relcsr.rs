//! Relative-index CSR.
//!
//! Each row is a list of `(gap, weight)` entries in column order, where
//! `gap` counts the zeros since the previous retained weight (or since the
//! row start). Gaps are `w` bits wide. The all-ones gap value is reserved
//! for padding: a padding entry skips `2^w - 1` zeros and carries `+0.0`.
//!
//! File layout (`DRCS`): magic | version u16 | rows u32 | cols u32 |
//! gap_bits u8 | per row: entry count u32, ceil(count * w / 8) bytes of
//! LSB-first packed gaps, count little-endian f32 weights.

use crate::bits::{BitReader, BitWriter};
use crate::error::{Error, Result};
use crate::tensor_io::{PruneMask, WeightMatrix};
use crate::wire::{dim_u32, ByteReader, ByteWriter};
use rayon::prelude::*;

use super::{check_activations, FormatKind, SparseContainer, CONTAINER_VERSION};

pub const RCSR_MAGIC: &[u8; 4] = b"DRCS";
pub const DEFAULT_GAP_BITS: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelCsrEntry {
    pub gap: u16,
    pub weight: f32,
}

impl RelCsrEntry {
    fn bit_eq(&self, other: &Self) -> bool {
        self.gap == other.gap && self.weight.to_bits() == other.weight.to_bits()
    }
}

#[derive(Debug, Clone)]
pub struct RelCsrContainer {
    rows: usize,
    cols: usize,
    gap_bits: u8,
    row_entries: Vec<Vec<RelCsrEntry>>,
}

impl PartialEq for RelCsrContainer {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.gap_bits == other.gap_bits
            && self.row_entries.len() == other.row_entries.len()
            && self
                .row_entries
                .iter()
                .zip(&other.row_entries)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bit_eq(y)))
    }
}

fn check_gap_bits(gap_bits: u8) -> Result<()> {
    if !(2..=16).contains(&gap_bits) {
        return Err(Error::InvalidParameter(format!(
            "gap width {gap_bits} is outside [2, 16]"
        )));
    }
    Ok(())
}

impl RelCsrContainer {
    /// Assembles a container from raw entries. Gap values must fit the
    /// width; positional consistency is checked when decoding.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        gap_bits: u8,
        row_entries: Vec<Vec<RelCsrEntry>>,
    ) -> Result<Self> {
        check_gap_bits(gap_bits)?;
        if rows == 0 || cols == 0 {
            return Err(Error::DegenerateShape { rows, cols });
        }
        if row_entries.len() != rows {
            return Err(Error::CorruptStream(format!(
                "{} row streams for {rows} rows",
                row_entries.len()
            )));
        }
        let max = (1u32 << gap_bits) - 1;
        if row_entries.iter().flatten().any(|e| e.gap as u32 > max) {
            return Err(Error::CorruptStream(format!(
                "gap exceeds {gap_bits}-bit width"
            )));
        }
        Ok(RelCsrContainer {
            rows,
            cols,
            gap_bits,
            row_entries,
        })
    }

    pub fn gap_bits(&self) -> u8 {
        self.gap_bits
    }

    /// Reserved gap value marking a padding entry.
    pub fn pad_gap(&self) -> u16 {
        ((1u32 << self.gap_bits) - 1) as u16
    }

    pub fn row(&self, r: usize) -> &[RelCsrEntry] {
        &self.row_entries[r]
    }

    pub fn is_padding(&self, e: &RelCsrEntry) -> bool {
        e.gap == self.pad_gap()
    }

    /// Decodes row `r` into `(column, weight)` pairs.
    pub fn row_positions(&self, r: usize) -> Result<Vec<(usize, f32)>> {
        let pad = self.pad_gap();
        let mut out = Vec::with_capacity(self.row_entries[r].len());
        let mut pos = 0usize;
        for e in &self.row_entries[r] {
            if e.gap == pad {
                if e.weight.to_bits() != 0 {
                    return Err(Error::CorruptStream(format!(
                        "row {r}: padding entry carries weight {}",
                        e.weight
                    )));
                }
                pos += pad as usize;
                if pos > self.cols {
                    return Err(Error::CorruptStream(format!(
                        "row {r}: padding overruns row"
                    )));
                }
            } else {
                let col = pos + e.gap as usize;
                if col >= self.cols {
                    return Err(Error::CorruptStream(format!(
                        "row {r}: position {col} exceeds {} columns",
                        self.cols
                    )));
                }
                if !e.weight.is_finite() {
                    return Err(Error::CorruptStream(format!("row {r}: non-finite weight")));
                }
                out.push((col, e.weight));
                pos = col + 1;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut rd = ByteReader::new(buf);
        rd.magic(RCSR_MAGIC)?;
        rd.version(CONTAINER_VERSION)?;
        let rows = rd.u32()? as usize;
        let cols = rd.u32()? as usize;
        let gap_bits = rd.u8()?;
        check_gap_bits(gap_bits)
            .map_err(|_| Error::CorruptStream(format!("gap width {gap_bits}")))?;
        if rows == 0 || cols == 0 {
            return Err(Error::DegenerateShape { rows, cols });
        }
        let mut row_entries = Vec::with_capacity(rows.min(rd.remaining() / 4));
        for _ in 0..rows {
            let count = rd.u32()? as usize;
            let gap_bytes = rd.take((count * gap_bits as usize).div_ceil(8))?;
            let weights = rd.f32s(count)?;
            let mut bits = BitReader::new(gap_bytes);
            let entries = weights
                .into_iter()
                .map(|weight| {
                    let gap = bits.read(gap_bits as u32).expect("length checked") as u16;
                    RelCsrEntry { gap, weight }
                })
                .collect();
            row_entries.push(entries);
        }
        rd.finish()?;
        Self::from_parts(rows, cols, gap_bits, row_entries)
    }
}

/// Encodes the masked weights of `m` as relative-index CSR.
pub fn rcsr_encode(m: &WeightMatrix, k: &PruneMask, gap_bits: u8) -> Result<RelCsrContainer> {
    check_gap_bits(gap_bits)?;
    k.ensure_matches(m)?;
    let pad = ((1u32 << gap_bits) - 1) as usize;
    let row_entries = (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let mut entries = Vec::new();
            let mut next = 0usize;
            for c in k.row_indices(r) {
                let mut gap = c - next;
                while gap >= pad {
                    entries.push(RelCsrEntry {
                        gap: pad as u16,
                        weight: 0.0,
                    });
                    gap -= pad;
                }
                entries.push(RelCsrEntry {
                    gap: gap as u16,
                    weight: row[c],
                });
                next = c + 1;
            }
            entries
        })
        .collect();
    Ok(RelCsrContainer {
        rows: m.rows(),
        cols: m.cols(),
        gap_bits,
        row_entries,
    })
}

pub fn rcsr_decode(c: &RelCsrContainer) -> Result<WeightMatrix> {
    let mut data = vec![0.0f32; c.rows * c.cols];
    for r in 0..c.rows {
        for (col, w) in c.row_positions(r)? {
            data[r * c.cols + col] = w;
        }
    }
    WeightMatrix::new(c.rows, c.cols, data)
}

impl SparseContainer for RelCsrContainer {
    fn kind(&self) -> FormatKind {
        FormatKind::RelCsr
    }

    fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn decode(&self) -> Result<WeightMatrix> {
        rcsr_decode(self)
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
        let pad = self.pad_gap();
        self.row_entries
            .iter()
            .flatten()
            .filter(|e| e.gap != pad)
            .count()
    }

    fn stored_weights(&self) -> usize {
        self.row_entries.iter().map(Vec::len).sum()
    }

    fn index_count(&self) -> usize {
        self.stored_weights()
    }

    fn index_bits(&self) -> usize {
        self.stored_weights() * self.gap_bits as usize
    }

    fn index_bytes(&self) -> usize {
        self.row_entries
            .iter()
            .map(|e| (e.len() * self.gap_bits as usize).div_ceil(8))
            .sum()
    }

    fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::with_capacity(15 + self.stored_weights() * 5 + self.rows * 4);
        w.bytes(RCSR_MAGIC)
            .u16(CONTAINER_VERSION)
            .u32(dim_u32(self.rows)?)
            .u32(dim_u32(self.cols)?)
            .u8(self.gap_bits);
        for entries in &self.row_entries {
            w.u32(dim_u32(entries.len())?);
            let mut bits = BitWriter::with_capacity_bits(entries.len() * self.gap_bits as usize);
            for e in entries {
                bits.push(e.gap as u32, self.gap_bits as u32);
            }
            w.bytes(&bits.into_bytes());
            let weights: Vec<f32> = entries.iter().map(|e| e.weight).collect();
            w.f32s(&weights);
        }
        Ok(w.into_inner())
    }
}
