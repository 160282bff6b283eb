//! Dense weight matrices, packed pruning masks, and their `DWMX` / `DMSK`
//! file containers.
//!
//! `DWMX`: magic | version u16 = 1 | rows u32 | cols u32 | dtype u8 = 0 |
//! 3 reserved zero bytes | rows*cols little-endian f32, row-major.
//!
//! `DMSK`: magic | version u16 = 1 | rows u32 | cols u32 |
//! ceil(rows*cols/8) bytes, row-major, LSB-first, tail bits zero.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::wire::{dim_u32, ByteReader, ByteWriter};

pub const MATRIX_MAGIC: &[u8; 4] = b"DWMX";
pub const MASK_MAGIC: &[u8; 4] = b"DMSK";
pub const FORMAT_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

fn check_shape(rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::DegenerateShape { rows, cols });
    }
    Ok(())
}

/// Dense row-major matrix of finite f32 weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl WeightMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        check_shape(rows, cols)?;
        if data.len() != rows * cols {
            return Err(Error::InvalidParameter(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteWeight { index });
        }
        Ok(WeightMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidParameter("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// True if both matrices hold the same bit patterns.
    pub fn bit_eq(&self, other: &WeightMatrix) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// First (row, col) where the bit patterns differ.
    pub fn first_divergence(&self, other: &WeightMatrix) -> Option<(usize, usize)> {
        if self.shape() != other.shape() {
            return Some((0, 0));
        }
        self.data
            .iter()
            .zip(&other.data)
            .position(|(a, b)| a.to_bits() != b.to_bits())
            .map(|i| (i / self.cols, i % self.cols))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        check_shape(self.rows, self.cols)?;
        let mut w = ByteWriter::with_capacity(20 + self.data.len() * 4);
        w.bytes(MATRIX_MAGIC)
            .u16(FORMAT_VERSION)
            .u32(dim_u32(self.rows)?)
            .u32(dim_u32(self.cols)?)
            .u8(DTYPE_F32)
            .bytes(&[0; 3])
            .f32s(&self.data);
        Ok(w.into_inner())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        r.magic(MATRIX_MAGIC)?;
        r.version(FORMAT_VERSION)?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::CorruptStream(format!("unknown dtype {dtype}")));
        }
        r.take(3)?;
        check_shape(rows, cols)?;
        let data = r.f32s(rows * cols)?;
        r.finish()?;
        Self::new(rows, cols, data)
    }
}

/// Row-major bitmap; a set bit marks a retained weight.
#[derive(Clone, PartialEq, Eq)]
pub struct PruneMask {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
}

impl fmt::Debug for PruneMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PruneMask")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("popcount", &self.popcount())
            .finish()
    }
}

impl PruneMask {
    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        check_shape(rows, cols)?;
        Ok(PruneMask {
            rows,
            cols,
            bits: vec![0; (rows * cols).div_ceil(8)],
        })
    }

    pub fn ones(rows: usize, cols: usize) -> Result<Self> {
        let mut m = Self::zeros(rows, cols)?;
        m.bits.fill(0xFF);
        m.clear_tail();
        Ok(m)
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self> {
        let mut m = Self::zeros(rows, cols)?;
        for r in 0..rows {
            for c in 0..cols {
                if f(r, c) {
                    m.set(r, c, true);
                }
            }
        }
        Ok(m)
    }

    /// Builds a mask from packed bytes, rejecting set tail bits.
    pub fn from_packed(rows: usize, cols: usize, bits: Vec<u8>) -> Result<Self> {
        check_shape(rows, cols)?;
        let n = rows * cols;
        if bits.len() != n.div_ceil(8) {
            return Err(Error::InvalidParameter(format!(
                "packed length {} does not cover {rows}x{cols}",
                bits.len()
            )));
        }
        let m = PruneMask { rows, cols, bits };
        if !n.is_multiple_of(8) && m.bits[n / 8] >> (n % 8) != 0 {
            return Err(Error::CorruptStream("mask tail bits are not zero".into()));
        }
        Ok(m)
    }

    fn clear_tail(&mut self) {
        let n = self.rows * self.cols;
        if !n.is_multiple_of(8) {
            let last = self.bits.len() - 1;
            self.bits[last] &= (1u8 << (n % 8)) - 1;
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.popcount() == 0
    }

    pub fn packed(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        let i = r * self.cols + c;
        (self.bits[i / 8] >> (i % 8)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, on: bool) {
        let i = r * self.cols + c;
        if on {
            self.bits[i / 8] |= 1 << (i % 8);
        } else {
            self.bits[i / 8] &= !(1 << (i % 8));
        }
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// Set bits in flat positions `[start, end)`.
    fn count_range(&self, start: usize, end: usize) -> usize {
        let mut n = 0;
        let mut i = start;
        while i < end && !i.is_multiple_of(8) {
            n += ((self.bits[i / 8] >> (i % 8)) & 1) as usize;
            i += 1;
        }
        while i + 8 <= end {
            n += self.bits[i / 8].count_ones() as usize;
            i += 8;
        }
        while i < end {
            n += ((self.bits[i / 8] >> (i % 8)) & 1) as usize;
            i += 1;
        }
        n
    }

    pub fn row_popcount(&self, r: usize) -> usize {
        self.count_range(r * self.cols, (r + 1) * self.cols)
    }

    /// Set bits of row `r` within columns `[c0, c1)`.
    pub fn row_range_popcount(&self, r: usize, c0: usize, c1: usize) -> usize {
        self.count_range(r * self.cols + c0, r * self.cols + c1)
    }

    /// Retained column indices of row `r`, ascending.
    pub fn row_indices(&self, r: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.cols).filter(move |&c| self.get(r, c))
    }

    pub fn ensure_matches(&self, m: &WeightMatrix) -> Result<()> {
        if self.shape() != m.shape() {
            return Err(Error::shape(m.shape(), self.shape()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        check_shape(self.rows, self.cols)?;
        let mut w = ByteWriter::with_capacity(14 + self.bits.len());
        w.bytes(MASK_MAGIC)
            .u16(FORMAT_VERSION)
            .u32(dim_u32(self.rows)?)
            .u32(dim_u32(self.cols)?)
            .bytes(&self.bits);
        Ok(w.into_inner())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        r.magic(MASK_MAGIC)?;
        r.version(FORMAT_VERSION)?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        check_shape(rows, cols)?;
        let bits = r.take((rows * cols).div_ceil(8))?.to_vec();
        r.finish()?;
        Self::from_packed(rows, cols, bits)
    }
}

/// Retained fraction of one mask row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowDensity {
    pub row: usize,
    pub retained: usize,
    pub density: f64,
}

impl RowDensity {
    pub fn of(mask: &PruneMask, row: usize) -> Self {
        let retained = mask.row_popcount(row);
        RowDensity {
            row,
            retained,
            density: retained as f64 / mask.cols() as f64,
        }
    }
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<WeightMatrix> {
    WeightMatrix::from_bytes(&fs::read(path)?)
}

pub fn save_matrix(m: &WeightMatrix, path: impl AsRef<Path>) -> Result<()> {
    let bytes = m.to_bytes()?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<PruneMask> {
    PruneMask::from_bytes(&fs::read(path)?)
}

pub fn save_mask(k: &PruneMask, path: impl AsRef<Path>) -> Result<()> {
    let bytes = k.to_bytes()?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Element distribution for synthetic matrices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightDist {
    Gaussian { mean: f32, std: f32 },
    Uniform { lo: f32, hi: f32 },
}

impl FromStr for WeightDist {
    type Err = Error;

    /// Parses `gaussian:MEAN,STD` or `uniform:LO,HI`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::BadDistribution(format!("cannot parse {s:?}"));
        let (kind, params) = s.split_once(':').ok_or_else(bad)?;
        let (a, b) = params.split_once(',').ok_or_else(bad)?;
        let a: f32 = a.trim().parse().map_err(|_| bad())?;
        let b: f32 = b.trim().parse().map_err(|_| bad())?;
        match kind {
            "gaussian" | "normal" => Ok(WeightDist::Gaussian { mean: a, std: b }),
            "uniform" => Ok(WeightDist::Uniform { lo: a, hi: b }),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for WeightDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightDist::Gaussian { mean, std } => write!(f, "gaussian:{mean},{std}"),
            WeightDist::Uniform { lo, hi } => write!(f, "uniform:{lo},{hi}"),
        }
    }
}

/// Deterministic i.i.d. matrix from `dist`, seeded with ChaCha8.
pub fn gen_synthetic(
    rows: usize,
    cols: usize,
    dist: WeightDist,
    seed: u64,
) -> Result<WeightMatrix> {
    check_shape(rows, cols)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rows * cols;
    let data: Vec<f32> = match dist {
        WeightDist::Gaussian { mean, std } => {
            if !(mean.is_finite() && std.is_finite() && std > 0.0) {
                return Err(Error::BadDistribution(format!(
                    "gaussian needs finite mean and std > 0, got ({mean}, {std})"
                )));
            }
            let d = Normal::new(mean, std).map_err(|e| Error::BadDistribution(e.to_string()))?;
            (0..n).map(|_| d.sample(&mut rng)).collect()
        }
        WeightDist::Uniform { lo, hi } => {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::BadDistribution(format!(
                    "uniform needs finite lo < hi, got ({lo}, {hi})"
                )));
            }
            let d = Uniform::new(lo, hi);
            (0..n).map(|_| d.sample(&mut rng)).collect()
        }
    };
    WeightMatrix::new(rows, cols, data)
}

/// Zeroes every weight whose mask bit is clear. Pruned entries are `+0.0`.
pub fn apply_mask(m: &WeightMatrix, k: &PruneMask) -> Result<WeightMatrix> {
    k.ensure_matches(m)?;
    let data = m
        .data
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            if (k.bits[i / 8] >> (i % 8)) & 1 == 1 {
                w
            } else {
                0.0
            }
        })
        .collect();
    Ok(WeightMatrix {
        rows: m.rows,
        cols: m.cols,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m23() -> WeightMatrix {
        WeightMatrix::new(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap()
    }

    #[test]
    fn matrix_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.dwmx");
        save_matrix(&m23(), &p).unwrap();
        let back = load_matrix(&p).unwrap();
        assert_eq!(back, m23());
        assert_eq!(fs::read(&p).unwrap().len(), 18 + 24);
    }

    #[test]
    fn matrix_header_layout() {
        let b = m23().to_bytes().unwrap();
        assert_eq!(&b[0..4], b"DWMX");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..10], &[2, 0, 0, 0]);
        assert_eq!(&b[10..14], &[3, 0, 0, 0]);
        assert_eq!(&b[14..18], &[0, 0, 0, 0]);
        assert_eq!(&b[18..22], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 18 + 6 * 4);
    }

    #[test]
    fn truncated_after_header() {
        let b = m23().to_bytes().unwrap();
        assert!(matches!(
            WeightMatrix::from_bytes(&b[..18]),
            Err(Error::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn nan_word_rejected() {
        let mut b = m23().to_bytes().unwrap();
        b[22..26].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            WeightMatrix::from_bytes(&b),
            Err(Error::NonFiniteWeight { index: 1 })
        ));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut b = m23().to_bytes().unwrap();
        b[0] = b'X';
        assert!(matches!(
            WeightMatrix::from_bytes(&b),
            Err(Error::BadMagic { .. })
        ));
        let mut b = m23().to_bytes().unwrap();
        b[4] = 2;
        assert!(matches!(
            WeightMatrix::from_bytes(&b),
            Err(Error::VersionMismatch { found: 2, .. })
        ));
    }

    #[test]
    fn zero_rows_rejected() {
        assert!(matches!(
            WeightMatrix::new(0, 3, vec![]),
            Err(Error::DegenerateShape { .. })
        ));
    }

    #[test]
    fn save_to_unwritable_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("missing").join("m.dwmx");
        assert!(matches!(save_matrix(&m23(), p), Err(Error::Io(_))));
    }

    #[test]
    fn mask_roundtrip_all_ones() {
        let k = PruneMask::ones(8, 8).unwrap();
        let back = PruneMask::from_bytes(&k.to_bytes().unwrap()).unwrap();
        assert_eq!(back, k);
        assert_eq!(back.popcount(), 64);
    }

    #[test]
    fn mask_popcount_preserved() {
        let k = PruneMask::from_fn(4, 5, |r, c| (r * 5 + c) % 3 != 1).unwrap();
        assert_eq!(k.popcount(), 13);
        let b = k.to_bytes().unwrap();
        assert_eq!(b.len(), 14 + 3);
        assert_eq!(PruneMask::from_bytes(&b).unwrap().popcount(), 13);
    }

    #[test]
    fn mask_tail_bits_must_be_zero() {
        let mut b = PruneMask::zeros(1, 5).unwrap().to_bytes().unwrap();
        b[14] = 0b0010_0000;
        assert!(matches!(
            PruneMask::from_bytes(&b),
            Err(Error::CorruptStream(_))
        ));
    }

    #[test]
    fn mask_shape_mismatch() {
        let k = PruneMask::ones(3, 2).unwrap();
        assert!(matches!(
            apply_mask(&m23(), &k),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn row_popcount_unaligned() {
        let k = PruneMask::from_fn(3, 7, |r, c| c <= r * 3).unwrap();
        assert_eq!(k.row_popcount(0), 1);
        assert_eq!(k.row_popcount(1), 4);
        assert_eq!(k.row_popcount(2), 7);
        assert_eq!(k.row_range_popcount(1, 2, 6), 2);
        assert_eq!(k.row_indices(1).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let d = WeightDist::Gaussian {
            mean: 0.0,
            std: 1.0,
        };
        let a = gen_synthetic(16, 16, d, 42).unwrap();
        let b = gen_synthetic(16, 16, d, 42).unwrap();
        let c = gen_synthetic(16, 16, d, 43).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn synthetic_rejects_degenerate_params() {
        let u: WeightDist = "uniform:1,0".parse().unwrap();
        assert!(matches!(
            gen_synthetic(2, 2, u, 0),
            Err(Error::BadDistribution(_))
        ));
        let g = WeightDist::Gaussian {
            mean: 0.0,
            std: 0.0,
        };
        assert!(matches!(
            gen_synthetic(2, 2, g, 0),
            Err(Error::BadDistribution(_))
        ));
        assert!("laplace:0,1".parse::<WeightDist>().is_err());
    }

    #[test]
    fn uniform_stays_in_range() {
        let m = gen_synthetic(50, 50, "uniform:-0.5,0.25".parse().unwrap(), 7).unwrap();
        assert!(m.data().iter().all(|&v| (-0.5..0.25).contains(&v)));
    }

    #[test]
    fn apply_mask_cases() {
        let m = WeightMatrix::from_rows(&[&[1., 2.], &[3., 4.]]).unwrap();
        let checker = PruneMask::from_fn(2, 2, |r, c| r == c).unwrap();
        assert_eq!(apply_mask(&m, &checker).unwrap().data(), &[1., 0., 0., 4.]);
        assert_eq!(apply_mask(&m, &PruneMask::ones(2, 2).unwrap()).unwrap(), m);
        let z = apply_mask(&m, &PruneMask::zeros(2, 2).unwrap()).unwrap();
        assert!(z.data().iter().all(|v| v.to_bits() == 0));
    }

    fn matrix_and_mask() -> impl Strategy<Value = (WeightMatrix, PruneMask)> {
        (1usize..12, 1usize..12, any::<u64>()).prop_map(|(r, c, seed)| {
            let m = gen_synthetic(
                r,
                c,
                WeightDist::Gaussian {
                    mean: 0.0,
                    std: 1.0,
                },
                seed,
            )
            .unwrap();
            let k = PruneMask::from_fn(r, c, |i, j| (seed >> ((i * c + j) % 64)) & 1 == 1).unwrap();
            (m, k)
        })
    }

    proptest! {
        #[test]
        fn file_roundtrip_bit_identical((m, k) in matrix_and_mask()) {
            let mb = m.to_bytes().unwrap();
            let m2 = WeightMatrix::from_bytes(&mb).unwrap();
            prop_assert!(m2.bit_eq(&m));
            prop_assert_eq!(m2.to_bytes().unwrap(), mb);
            let kb = k.to_bytes().unwrap();
            prop_assert_eq!(PruneMask::from_bytes(&kb).unwrap(), k);
        }

        #[test]
        fn apply_mask_idempotent_and_counts((m, k) in matrix_and_mask()) {
            let once = apply_mask(&m, &k).unwrap();
            let twice = apply_mask(&once, &k).unwrap();
            prop_assert!(once.bit_eq(&twice));
            if m.data().iter().all(|&v| v != 0.0) {
                let nz = once.data().iter().filter(|&&v| v != 0.0).count();
                prop_assert_eq!(nz, k.popcount());
            }
        }
    }
}
