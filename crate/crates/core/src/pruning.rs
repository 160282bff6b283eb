//! Pruning-mask generators: irregular top-K, block-max weight masking
//! (BMWM), tile-level block pruning, and density-adaptive regular-block
//! (DARB) pruning with its per-row power-of-two block-size plan.
//!
//! Every generator is deterministic. Whenever two candidates tie on
//! magnitude the lower position wins.

use rayon::prelude::*;
use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor_io::{PruneMask, RowDensity, WeightMatrix};
use crate::wire::{dim_u32, ByteReader, ByteWriter};

pub const PLAN_MAGIC: &[u8; 4] = b"DPLN";
pub const PLAN_VERSION: u16 = 1;
/// Per-row marker for a dropped row in the `DPLN` stream.
pub const DROPPED_ROW: u8 = 0xFF;
pub const DEFAULT_CAP: u32 = 64;

/// `floor(x + 0.5)`, the rounding used for every "keep K of N" target.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

fn check_density(d: f64) -> Result<()> {
    if !(d.is_finite() && d > 0.0 && d <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "density {d} is outside (0, 1]"
        )));
    }
    Ok(())
}

/// Number of weights to keep for `density` over `n` elements.
pub fn target_count(density: f64, n: usize) -> Result<usize> {
    check_density(density)?;
    match round_half_up(density * n as f64).min(n) {
        0 => Err(Error::EmptyMask),
        k => Ok(k),
    }
}

/// Sort key that orders by descending magnitude, then ascending position.
#[inline]
fn magnitude_key(w: f32, pos: usize) -> u64 {
    // |w| of a finite float orders identically to its bit pattern.
    let mag = w.abs().to_bits();
    ((!mag as u64) << 32) | pos as u64
}

/// Positions of the `k` largest-magnitude entries of `values`, ascending.
fn top_k_positions(values: &[f32], k: usize) -> Vec<usize> {
    debug_assert!(values.len() <= u32::MAX as usize + 1);
    if k == 0 {
        return Vec::new();
    }
    let mut keys: Vec<u64> = values
        .iter()
        .enumerate()
        .map(|(i, &w)| magnitude_key(w, i))
        .collect();
    if k < keys.len() {
        keys.select_nth_unstable(k - 1);
        keys.truncate(k);
    }
    let mut pos: Vec<usize> = keys
        .iter()
        .map(|key| (key & 0xFFFF_FFFF) as usize)
        .collect();
    pos.sort_unstable();
    pos
}

/// Keeps exactly `round(density * rows * cols)` weights, largest magnitude first.
pub fn irregular_mask(m: &WeightMatrix, target_density: f64) -> Result<PruneMask> {
    let n = m.rows() * m.cols();
    if n > u32::MAX as usize + 1 {
        return Err(Error::InvalidParameter(format!(
            "{n} elements exceed the 2^32 limit"
        )));
    }
    let k = target_count(target_density, n)?;
    let mut mask = PruneMask::zeros(m.rows(), m.cols())?;
    for p in top_k_positions(m.data(), k) {
        mask.set(p / m.cols(), p % m.cols(), true);
    }
    Ok(mask)
}

/// Column of the largest |w| in `row[start..end]`; first occurrence wins.
#[inline]
pub(crate) fn block_argmax(row: &[f32], start: usize, end: usize) -> usize {
    let mut best = start;
    let mut best_mag = row[start].abs();
    for (c, w) in row.iter().enumerate().take(end).skip(start + 1) {
        let mag = w.abs();
        if mag > best_mag {
            best = c;
            best_mag = mag;
        }
    }
    best
}

/// Column among `cols` (ascending) with the largest |w|; first occurrence wins.
pub(crate) fn block_argmax_of(row: &[f32], cols: &[usize]) -> usize {
    let mut best = cols[0];
    for &c in &cols[1..] {
        if row[c].abs() > row[best].abs() {
            best = c;
        }
    }
    best
}

/// Retained columns of one row under BMWM with block width `block`.
pub(crate) fn row_block_maxima(row: &[f32], block: usize) -> impl Iterator<Item = usize> + '_ {
    let cols = row.len();
    (0..cols.div_ceil(block)).map(move |b| {
        let start = b * block;
        block_argmax(row, start, (start + block).min(cols))
    })
}

/// Block-max weight masking: one retained weight per `block_size` slice of each row.
pub fn bmwm_mask(m: &WeightMatrix, block_size: usize) -> Result<PruneMask> {
    if block_size == 0 {
        return Err(Error::InvalidParameter(
            "block size must be at least 1".into(),
        ));
    }
    if block_size > m.cols() {
        return Err(Error::BlockTooLarge {
            block: block_size,
            cols: m.cols(),
        });
    }
    rows_to_mask(m, |r| row_block_maxima(m.row(r), block_size).collect())
}

/// Builds a mask from per-row column selections computed in parallel.
fn rows_to_mask<F>(m: &WeightMatrix, select: F) -> Result<PruneMask>
where
    F: Fn(usize) -> Vec<usize> + Sync + Send,
{
    let mut mask = PruneMask::zeros(m.rows(), m.cols())?;
    let picks: Vec<Vec<usize>> = (0..m.rows()).into_par_iter().map(select).collect();
    for (r, cols) in picks.into_iter().enumerate() {
        for c in cols {
            mask.set(r, c, true);
        }
    }
    Ok(mask)
}

/// Tile-level pruning. Tiles are ranked by mean |w| over their actual
/// elements and kept whole until the retained count reaches the target.
pub fn block_prune_mask(
    m: &WeightMatrix,
    block_rows: usize,
    block_cols: usize,
    target_density: f64,
) -> Result<PruneMask> {
    if block_rows == 0 || block_cols == 0 {
        return Err(Error::InvalidParameter(
            "tile dimensions must be at least 1".into(),
        ));
    }
    let k = target_count(target_density, m.rows() * m.cols())?;
    let tile_rows = m.rows().div_ceil(block_rows);
    let tile_cols = m.cols().div_ceil(block_cols);

    let tile_extent = |t: usize, block: usize, len: usize| (t * block, ((t + 1) * block).min(len));
    let mut tiles: Vec<(f64, usize, usize)> = Vec::with_capacity(tile_rows * tile_cols);
    for tr in 0..tile_rows {
        let (r0, r1) = tile_extent(tr, block_rows, m.rows());
        for tc in 0..tile_cols {
            let (c0, c1) = tile_extent(tc, block_cols, m.cols());
            let mut sum = 0.0f64;
            for r in r0..r1 {
                for &w in &m.row(r)[c0..c1] {
                    sum += w.abs() as f64;
                }
            }
            let count = (r1 - r0) * (c1 - c0);
            tiles.push((sum / count as f64, tr, tc));
        }
    }
    // Stable sort keeps (tile-row, tile-col) order among equal scores.
    tiles.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut mask = PruneMask::zeros(m.rows(), m.cols())?;
    let mut retained = 0;
    for &(_, tr, tc) in &tiles {
        if retained >= k {
            break;
        }
        let (r0, r1) = tile_extent(tr, block_rows, m.rows());
        let (c0, c1) = tile_extent(tc, block_cols, m.cols());
        for r in r0..r1 {
            for c in c0..c1 {
                mask.set(r, c, true);
            }
        }
        retained += (r1 - r0) * (c1 - c0);
    }
    Ok(mask)
}

/// Non-negative rational `num / den`, compared exactly.
#[derive(Debug, Clone, Copy)]
pub struct Fraction {
    pub num: u64,
    pub den: u64,
}

impl Fraction {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 {
            return Err(Error::InvalidParameter("zero denominator".into()));
        }
        Ok(Fraction { num, den })
    }

    /// Exact rational for a decimal literal such as `"0.2188"`.
    pub fn from_decimal(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("not a non-negative decimal: {s:?}"));
        let (int, frac) = s.trim().split_once('.').unwrap_or((s.trim(), ""));
        if frac.len() > 18 || !int.bytes().chain(frac.bytes()).all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() {
            0
        } else {
            int.parse().map_err(|_| bad())?
        };
        let frac: u64 = if frac.is_empty() {
            0
        } else {
            frac.parse().map_err(|_| bad())?
        };
        let num = int
            .checked_mul(den)
            .and_then(|v| v.checked_add(frac))
            .ok_or_else(bad)?;
        Fraction::new(num, den)
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn is_zero(self) -> bool {
        self.num == 0
    }
}

impl PartialEq for Fraction {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Fraction {}

impl PartialOrd for Fraction {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Fraction {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.num as u128 * other.den as u128).cmp(&(other.num as u128 * self.den as u128))
    }
}

/// Matrix density and per-row retained counts of a mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DensitySummary {
    pub rows: usize,
    pub cols: usize,
    pub row_retained: Vec<usize>,
    pub total_retained: usize,
}

impl DensitySummary {
    pub fn matrix_fraction(&self) -> Fraction {
        Fraction {
            num: self.total_retained as u64,
            den: (self.rows * self.cols) as u64,
        }
    }

    pub fn matrix_density(&self) -> f64 {
        self.matrix_fraction().to_f64()
    }

    pub fn row_fraction(&self, r: usize) -> Fraction {
        Fraction {
            num: self.row_retained[r] as u64,
            den: self.cols as u64,
        }
    }

    pub fn row_densities(&self) -> Vec<RowDensity> {
        self.row_retained
            .iter()
            .enumerate()
            .map(|(row, &retained)| RowDensity {
                row,
                retained,
                density: retained as f64 / self.cols as f64,
            })
            .collect()
    }
}

pub fn compute_density_summary(k: &PruneMask) -> DensitySummary {
    let row_retained: Vec<usize> = (0..k.rows()).map(|r| k.row_popcount(r)).collect();
    DensitySummary {
        rows: k.rows(),
        cols: k.cols(),
        total_retained: row_retained.iter().sum(),
        row_retained,
    }
}

/// What to do with rows that retain nothing under the reference mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmptyRowPolicy {
    /// Use the largest block size, keeping ceil(cols / cap) weights.
    #[default]
    Cap,
    /// Drop the row entirely.
    Drop,
}

impl FromStr for EmptyRowPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cap" => Ok(EmptyRowPolicy::Cap),
            "drop" => Ok(EmptyRowPolicy::Drop),
            _ => Err(Error::InvalidParameter(format!(
                "unknown empty-row policy {s:?}"
            ))),
        }
    }
}

/// Largest k with `p * 2^k <= q`, and smallest k with `p * 2^k >= q`.
fn log2_bounds(p: u64, q: u64) -> (u32, u32) {
    debug_assert!(p > 0 && p <= q);
    let (p, q) = (p as u128, q as u128);
    let mut lo = 0;
    while p << (lo + 1) <= q {
        lo += 1;
    }
    let hi = if p << lo == q { lo } else { lo + 1 };
    (lo, hi)
}

/// DARB block size for a row with density `row` in a matrix of density
/// `matrix`: dense rows round their density up (smaller block), sparse rows
/// round it down (larger block). Rows at exactly the matrix density take the
/// nearest power of two to `1 / row`, ties going to the smaller block. The
/// result is clamped to `cap`. Returns `None` for an empty row.
pub fn darb_block_size(row: Fraction, matrix: Fraction, cap: u32) -> Option<u32> {
    if row.is_zero() {
        return None;
    }
    let (num, den) = if row.num > row.den {
        (1, 1)
    } else {
        (row.num, row.den)
    };
    let (lo, hi) = log2_bounds(num, den);
    let exp = if lo == hi {
        lo
    } else {
        match row.cmp(&matrix) {
            Ordering::Greater => lo,
            Ordering::Less => hi,
            Ordering::Equal => {
                // 1/d - 2^lo <= 2^hi - 1/d  <=>  2 den <= (2^lo + 2^hi) num
                let sum = (1u128 << lo) + (1u128 << hi);
                if 2 * den as u128 <= sum * num as u128 {
                    lo
                } else {
                    hi
                }
            }
        }
    };
    Some((1u64 << exp).min(cap as u64) as u32)
}

/// Per-row power-of-two block sizes for DARB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSizePlan {
    cols: usize,
    cap_log2: u8,
    /// log2 of each row's block size; `None` marks a dropped row.
    row_log2: Vec<Option<u8>>,
}

impl BlockSizePlan {
    pub fn new(cols: usize, cap: u32, sizes: &[Option<u32>]) -> Result<Self> {
        if cols == 0 || sizes.is_empty() {
            return Err(Error::DegenerateShape {
                rows: sizes.len(),
                cols,
            });
        }
        if !cap.is_power_of_two() || cap as usize > cols.next_power_of_two() {
            return Err(Error::InvalidParameter(format!(
                "cap {cap} must be a power of two no larger than {}",
                cols.next_power_of_two()
            )));
        }
        let row_log2 = sizes
            .iter()
            .map(|s| match *s {
                None => Ok(None),
                Some(b) if b.is_power_of_two() && b <= cap => Ok(Some(b.trailing_zeros() as u8)),
                Some(b) => Err(Error::InvalidParameter(format!(
                    "block size {b} is not a power of two in [1, {cap}]"
                ))),
            })
            .collect::<Result<_>>()?;
        Ok(BlockSizePlan {
            cols,
            cap_log2: cap.trailing_zeros() as u8,
            row_log2,
        })
    }

    /// Uniform plan with every row at `block`.
    pub fn uniform(rows: usize, cols: usize, block: u32) -> Result<Self> {
        let cap = block.max(1);
        Self::new(cols, cap, &vec![Some(block); rows])
    }

    pub fn rows(&self) -> usize {
        self.row_log2.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cap(&self) -> u32 {
        1 << self.cap_log2
    }

    pub fn index_width(&self, r: usize) -> Option<u32> {
        self.row_log2[r].map(u32::from)
    }

    pub fn block_size(&self, r: usize) -> Option<usize> {
        self.row_log2[r].map(|e| 1usize << e)
    }

    pub fn sizes(&self) -> Vec<Option<u32>> {
        self.row_log2.iter().map(|e| e.map(|e| 1u32 << e)).collect()
    }

    pub fn is_dropped(&self, r: usize) -> bool {
        self.row_log2[r].is_none()
    }

    /// Blocks (and therefore retained weights) in row `r`.
    pub fn blocks_in_row(&self, r: usize) -> usize {
        self.block_size(r).map_or(0, |b| self.cols.div_ceil(b))
    }

    /// Σ ceil(cols / b_r) over non-dropped rows.
    pub fn retained_count(&self) -> usize {
        (0..self.rows()).map(|r| self.blocks_in_row(r)).sum()
    }

    /// Index bits of row `r` before byte alignment.
    pub fn row_index_bits(&self, r: usize) -> usize {
        self.blocks_in_row(r) * self.index_width(r).unwrap_or(0) as usize
    }

    /// Σ ceil(cols / b_r) * log2(b_r), without per-row alignment.
    pub fn index_bits(&self) -> usize {
        (0..self.rows()).map(|r| self.row_index_bits(r)).sum()
    }

    pub fn ensure_matches(&self, m: &WeightMatrix) -> Result<()> {
        if (self.rows(), self.cols) != m.shape() {
            return Err(Error::shape(m.shape(), (self.rows(), self.cols)));
        }
        Ok(())
    }

    pub(crate) fn write(&self, w: &mut ByteWriter) -> Result<()> {
        w.bytes(PLAN_MAGIC)
            .u16(PLAN_VERSION)
            .u32(dim_u32(self.rows())?)
            .u32(dim_u32(self.cols)?)
            .u8(self.cap_log2);
        for e in &self.row_log2 {
            w.u8(e.unwrap_or(DROPPED_ROW));
        }
        Ok(())
    }

    pub(crate) fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        r.magic(PLAN_MAGIC)?;
        r.version(PLAN_VERSION)?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let cap_log2 = r.u8()?;
        if cap_log2 > 31 {
            return Err(Error::CorruptStream(format!("cap exponent {cap_log2}")));
        }
        let raw = r.take(rows)?;
        let sizes: Vec<Option<u32>> = raw
            .iter()
            .map(|&e| match e {
                DROPPED_ROW => Ok(None),
                e if e <= cap_log2 => Ok(Some(1u32 << e)),
                e => Err(Error::CorruptStream(format!(
                    "row exponent {e} exceeds cap exponent {cap_log2}"
                ))),
            })
            .collect::<Result<_>>()?;
        Self::new(cols, 1 << cap_log2, &sizes).map_err(|e| match e {
            Error::InvalidParameter(s) => Error::CorruptStream(s),
            other => other,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::with_capacity(15 + self.rows());
        self.write(&mut w)?;
        Ok(w.into_inner())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        let plan = Self::read(&mut r)?;
        r.finish()?;
        Ok(plan)
    }
}

impl fmt::Display for BlockSizePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "plan {}x{} cap {}", self.rows(), self.cols, self.cap())
    }
}

/// Chooses each row's DARB block size from a reference (irregular) mask.
///
/// `cap` must be a power of two >= 2; it is further limited to the
/// next power of two of the row length.
pub fn darb_block_sizes(
    reference: &DensitySummary,
    cap: u32,
    empty_policy: EmptyRowPolicy,
) -> Result<BlockSizePlan> {
    if cap < 2 || !cap.is_power_of_two() {
        return Err(Error::InvalidParameter(format!(
            "cap {cap} must be a power of two >= 2"
        )));
    }
    let cap = cap.min(reference.cols.next_power_of_two() as u32);
    let matrix = reference.matrix_fraction();
    let sizes: Vec<Option<u32>> = (0..reference.rows)
        .map(
            |r| match darb_block_size(reference.row_fraction(r), matrix, cap) {
                Some(b) => Some(b),
                None => match empty_policy {
                    EmptyRowPolicy::Cap => Some(cap),
                    EmptyRowPolicy::Drop => None,
                },
            },
        )
        .collect();
    BlockSizePlan::new(reference.cols, cap, &sizes)
}

/// BMWM with each row's block size taken from `plan`, selecting from the
/// original weights. Dropped rows retain nothing.
pub fn darb_mask(m: &WeightMatrix, plan: &BlockSizePlan) -> Result<PruneMask> {
    plan.ensure_matches(m)?;
    rows_to_mask(m, |r| {
        plan.block_size(r)
            .map_or_else(Vec::new, |b| row_block_maxima(m.row(r), b).collect())
    })
}

/// Which half of the density-sorted rows keeps its base mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Anchor {
    Dense,
    Sparse,
}

impl FromStr for Anchor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Anchor::Dense),
            "sparse" => Ok(Anchor::Sparse),
            _ => Err(Error::InvalidParameter(format!("unknown anchor {s:?}"))),
        }
    }
}

/// Rows ordered by ascending base density (ties by row index), split into
/// the sparse half (first `rows / 2`) and the dense half (the rest).
pub fn split_rows_by_density(base: &PruneMask) -> Result<(Vec<usize>, Vec<usize>)> {
    if base.rows() < 2 {
        return Err(Error::DegenerateSplit { rows: base.rows() });
    }
    let mut order: Vec<(usize, usize)> = (0..base.rows())
        .map(|r| (base.row_popcount(r), r))
        .collect();
    order.sort_unstable();
    let sorted: Vec<usize> = order.into_iter().map(|(_, r)| r).collect();
    let (sparse, dense) = sorted.split_at(base.rows() / 2);
    Ok((sparse.to_vec(), dense.to_vec()))
}

/// Mask schedule for the row-sensitivity sweep.
///
/// The anchored half keeps its bits from `irregular_mask(m, base_density)`.
/// Each row of the swept half is re-pruned to its top
/// `min(round(s * cols), current)` weights, so sweeping only ever removes
/// weights. A sweep value equal to `base_density` returns the base mask.
pub fn sensitivity_masks(
    m: &WeightMatrix,
    base_density: f64,
    sweep: &[f64],
    anchor: Anchor,
) -> Result<Vec<PruneMask>> {
    if !(base_density > 0.0 && base_density < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "base density {base_density} is outside (0, 1)"
        )));
    }
    let base = irregular_mask(m, base_density)?;
    let (sparse, dense) = split_rows_by_density(&base)?;
    let swept = match anchor {
        Anchor::Dense => sparse,
        Anchor::Sparse => dense,
    };

    sweep
        .iter()
        .map(|&s| {
            if !s.is_finite() || s <= 0.0 {
                return Err(Error::EmptyMask);
            }
            if s > base_density {
                return Err(Error::InvalidParameter(format!(
                    "sweep density {s} exceeds base density {base_density}"
                )));
            }
            if s == base_density {
                return Ok(base.clone());
            }
            let per_row = round_half_up(s * m.cols() as f64);
            if per_row == 0 {
                return Err(Error::EmptyMask);
            }
            let mut mask = base.clone();
            for &r in &swept {
                let keep = per_row.min(base.row_popcount(r));
                for c in 0..m.cols() {
                    mask.set(r, c, false);
                }
                for c in top_k_positions(m.row(r), keep) {
                    mask.set(r, c, true);
                }
            }
            Ok(mask)
        })
        .collect()
}
