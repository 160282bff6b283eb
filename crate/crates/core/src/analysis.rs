//! Structural and salience metrics over masks, plus the index-storage model.

use std::fmt;

use crate::error::{Error, Result};
use crate::formats::{FormatKind, SparseContainer};
use crate::tensor_io::{PruneMask, WeightMatrix};

/// Rows per density bin over `[0, 1]`, plus the density spread.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityHistogram {
    pub counts: Vec<usize>,
    pub min_density: f64,
    pub max_density: f64,
    /// Densest row over sparsest row; `None` when some row is empty.
    pub max_min_ratio: Option<f64>,
}

impl DensityHistogram {
    /// Lower edge of bin `i`.
    pub fn bin_start(&self, i: usize) -> f64 {
        i as f64 / self.counts.len() as f64
    }
}

/// Bins rows by density. Bin `i` covers `[i/bins, (i+1)/bins)`; a density of
/// exactly 1 falls in the last bin.
pub fn row_density_histogram(k: &PruneMask, bins: usize) -> Result<DensityHistogram> {
    if bins == 0 {
        return Err(Error::InvalidParameter(
            "histogram needs at least one bin".into(),
        ));
    }
    let cols = k.cols();
    let mut counts = vec![0usize; bins];
    let (mut lo, mut hi) = (usize::MAX, 0usize);
    for r in 0..k.rows() {
        let c = k.row_popcount(r);
        counts[(c * bins / cols).min(bins - 1)] += 1;
        lo = lo.min(c);
        hi = hi.max(c);
    }
    Ok(DensityHistogram {
        counts,
        min_density: lo as f64 / cols as f64,
        max_density: hi as f64 / cols as f64,
        max_min_ratio: (lo > 0).then(|| hi as f64 / lo as f64),
    })
}

/// How many row blocks hold zero, one, or several retained weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupancyStats {
    pub block_size: usize,
    pub blocks: usize,
    pub zero: usize,
    pub one: usize,
    pub multi: usize,
    pub p_zero: f64,
    pub p_one: f64,
    pub p_multi: f64,
}

/// Splits each row into `block_size`-wide blocks (trailing partial blocks
/// included) and classifies them by retained count.
pub fn block_occupancy(k: &PruneMask, block_size: usize) -> Result<OccupancyStats> {
    if block_size == 0 {
        return Err(Error::InvalidParameter(
            "block size must be at least 1".into(),
        ));
    }
    let (mut zero, mut one, mut multi) = (0, 0, 0);
    for r in 0..k.rows() {
        for c0 in (0..k.cols()).step_by(block_size) {
            match k.row_range_popcount(r, c0, (c0 + block_size).min(k.cols())) {
                0 => zero += 1,
                1 => one += 1,
                _ => multi += 1,
            }
        }
    }
    let blocks = zero + one + multi;
    let frac = |n: usize| n as f64 / blocks as f64;
    Ok(OccupancyStats {
        block_size,
        blocks,
        zero,
        one,
        multi,
        p_zero: frac(zero),
        p_one: frac(one),
        p_multi: frac(multi),
    })
}

/// Closed-form occupancy when each position is retained independently
/// with probability `density`: `(P[0], P[1], P[>1])` of Binomial(n, density).
pub fn binomial_occupancy(block_size: usize, density: f64) -> (f64, f64, f64) {
    let n = block_size as i32;
    let q = 1.0 - density;
    let p0 = q.powi(n);
    let p1 = n as f64 * density * q.powi(n - 1);
    (p0, p1, 1.0 - p0 - p1)
}

/// Mean absolute weight of two selections and their relative difference
/// `|mean_a - mean_b| / mean_a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SalienceReport {
    pub mean_a: f64,
    pub mean_b: f64,
    pub count_a: usize,
    pub count_b: usize,
    pub rel_diff: f64,
}

impl SalienceReport {
    fn from_sums(sum_a: f64, count_a: usize, sum_b: f64, count_b: usize) -> Result<Self> {
        let mean_a = sum_a / count_a as f64;
        let mean_b = sum_b / count_b as f64;
        if mean_a == 0.0 {
            return Err(Error::InvalidParameter(
                "relative difference is undefined for a zero reference mean".into(),
            ));
        }
        Ok(SalienceReport {
            mean_a,
            mean_b,
            count_a,
            count_b,
            rel_diff: (mean_a - mean_b).abs() / mean_a,
        })
    }
}

/// Compares the weights irregular pruning dropped with the ones it kept.
///
/// `mean_a` averages |w| over the retained weights of multi-weight blocks,
/// excluding each block's largest (all-but-largest). `mean_b` averages the
/// largest |w| of each block with no retained weight.
pub fn empty_block_salience(
    m: &WeightMatrix,
    k: &PruneMask,
    block_size: usize,
) -> Result<SalienceReport> {
    k.ensure_matches(m)?;
    if block_size == 0 {
        return Err(Error::InvalidParameter(
            "block size must be at least 1".into(),
        ));
    }
    let (mut abl_sum, mut abl_n) = (0.0f64, 0usize);
    let (mut empty_sum, mut empty_n) = (0.0f64, 0usize);
    let mut kept = Vec::with_capacity(block_size);
    for r in 0..m.rows() {
        let row = m.row(r);
        for c0 in (0..m.cols()).step_by(block_size) {
            let c1 = (c0 + block_size).min(m.cols());
            kept.clear();
            kept.extend((c0..c1).filter(|&c| k.get(r, c)));
            match kept.len() {
                0 => {
                    let max = row[c0..c1].iter().fold(0.0f32, |a, w| a.max(w.abs()));
                    empty_sum += max as f64;
                    empty_n += 1;
                }
                1 => {}
                _ => {
                    // First occurrence of the maximum counts as "the largest".
                    let largest = crate::pruning::block_argmax_of(row, &kept);
                    for &c in kept.iter().filter(|&&c| c != largest) {
                        abl_sum += row[c].abs() as f64;
                        abl_n += 1;
                    }
                }
            }
        }
    }
    if empty_n == 0 {
        return Err(Error::NoEmptyBlocks);
    }
    if abl_n == 0 {
        return Err(Error::NoMultiBlocks);
    }
    SalienceReport::from_sums(abl_sum, abl_n, empty_sum, empty_n)
}

fn retained_abs_sum(m: &WeightMatrix, k: &PruneMask) -> (f64, usize) {
    let mut sum = 0.0f64;
    let mut n = 0;
    for r in 0..m.rows() {
        for c in k.row_indices(r) {
            sum += m.get(r, c).abs() as f64;
            n += 1;
        }
    }
    (sum, n)
}

/// Mean |w| under a reference mask (`mean_a`) against a test mask (`mean_b`).
pub fn retained_salience(
    m: &WeightMatrix,
    k_ref: &PruneMask,
    k_test: &PruneMask,
) -> Result<SalienceReport> {
    k_ref.ensure_matches(m)?;
    k_test.ensure_matches(m)?;
    let (sum_a, n_a) = retained_abs_sum(m, k_ref);
    let (sum_b, n_b) = retained_abs_sum(m, k_test);
    if n_a == 0 || n_b == 0 {
        return Err(Error::EmptyMask);
    }
    SalienceReport::from_sums(sum_a, n_a, sum_b, n_b)
}

/// Total elements over retained elements.
pub fn pruning_ratio(k: &PruneMask) -> Result<f64> {
    pruning_ratio_from_counts(k.len(), k.popcount())
}

pub fn pruning_ratio_from_counts(total: usize, retained: usize) -> Result<f64> {
    if retained == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(total as f64 / retained as f64)
}

/// Index/weight storage of an encoded container.
#[derive(Debug, Clone, PartialEq)]
pub struct StorageReport {
    pub format: FormatKind,
    pub retained: usize,
    pub stored_weights: usize,
    pub weight_bits: u32,
    pub weight_bytes: f64,
    pub index_count: usize,
    /// Exact index payload, without per-row alignment.
    pub index_bits: usize,
    /// Index payload as laid out in the container.
    pub index_bytes: usize,
    pub total_bytes: f64,
    /// `8 * index_bytes / retained`.
    pub avg_index_bits: f64,
    /// `index_bits / retained`.
    pub avg_index_bits_unaligned: f64,
}

pub const DEFAULT_WEIGHT_BITS: u32 = 8;

/// Storage of `container` with weights counted at `weight_bits` each.
///
/// Weight bytes cover every stored weight slot (RelCSR padding entries
/// included); index figures come from the encoded index payload.
pub fn storage_report(container: &dyn SparseContainer, weight_bits: u32) -> Result<StorageReport> {
    if ![8, 16, 32].contains(&weight_bits) {
        return Err(Error::InvalidParameter(format!(
            "weight width {weight_bits} must be 8, 16 or 32"
        )));
    }
    let retained = container.retained();
    if retained == 0 {
        return Err(Error::EmptyMask);
    }
    let stored = container.stored_weights();
    let weight_bytes = stored as f64 * weight_bits as f64 / 8.0;
    let index_bytes = container.index_bytes();
    let index_bits = container.index_bits();
    Ok(StorageReport {
        format: container.kind(),
        retained,
        stored_weights: stored,
        weight_bits,
        weight_bytes,
        index_count: container.index_count(),
        index_bits,
        index_bytes,
        total_bytes: weight_bytes + index_bytes as f64,
        avg_index_bits: 8.0 * index_bytes as f64 / retained as f64,
        avg_index_bits_unaligned: index_bits as f64 / retained as f64,
    })
}

/// Reference DARB index figures for a 66M-weight model pruned 13.14x:
/// 5.02M indices stated to fit in under 0.63 MB, while also averaging
/// "under four" bits each. The two cannot both be tight, so reports carry
/// both projections next to the measured average.
pub const REFERENCE_DARB_INDICES: f64 = 5.02e6;
pub const REFERENCE_DARB_INDEX_BUDGET_BYTES: f64 = 0.63e6;
pub const REFERENCE_DARB_AVG_BITS_BOUND: f64 = 4.0;

/// Puts a measured average index width next to the reference budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexBudgetNote {
    /// Bits per index implied by the reference budget (about 1.0).
    pub budget_bits_per_index: f64,
    /// Reference index count at the stated average-width bound (about 2.5 MB).
    pub bound_bytes: f64,
    pub measured_bits_per_index: f64,
    /// Reference index count at the measured average width.
    pub projected_bytes: f64,
}

impl IndexBudgetNote {
    pub fn new(measured_bits_per_index: f64) -> Self {
        IndexBudgetNote {
            budget_bits_per_index: REFERENCE_DARB_INDEX_BUDGET_BYTES * 8.0 / REFERENCE_DARB_INDICES,
            bound_bytes: REFERENCE_DARB_INDICES * REFERENCE_DARB_AVG_BITS_BOUND / 8.0,
            measured_bits_per_index,
            projected_bytes: REFERENCE_DARB_INDICES * measured_bits_per_index / 8.0,
        }
    }
}

impl fmt::Display for IndexBudgetNote {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "a 0.63 MB budget for 5.02M DARB indices implies {:.3} bits/index, but a {} bit/index \
             average would need {:.3} MB; this container averages {:.3} bits/index, i.e. {:.3} MB \
             for 5.02M indices",
            self.budget_bits_per_index,
            REFERENCE_DARB_AVG_BITS_BOUND,
            self.bound_bytes / 1e6,
            self.measured_bits_per_index,
            self.projected_bytes / 1e6
        )
    }
}
