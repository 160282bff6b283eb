//! Block-coordinate container for tile-level pruning.
//!
//! File layout (`DBLK`): magic | version u16 | rows u32 | cols u32 |
//! block_rows u16 | block_cols u16 | tile count u32 | per tile: tile-row
//! u32, tile-col u32, then the tile's actual elements as row-major f32
//! (edge tiles are shorter).

use crate::error::{Error, Result};
use crate::tensor_io::{PruneMask, WeightMatrix};
use crate::wire::{dim_u32, ByteReader, ByteWriter};

use super::{check_activations, FormatKind, SparseContainer, CONTAINER_VERSION};

pub const BLOCK_MAGIC: &[u8; 4] = b"DBLK";
/// Two u32 coordinates per tile.
const TILE_INDEX_BITS: usize = 64;

#[derive(Debug, Clone)]
pub struct Tile {
    pub tile_row: u32,
    pub tile_col: u32,
    pub values: Vec<f32>,
}

impl PartialEq for Tile {
    fn eq(&self, other: &Self) -> bool {
        self.tile_row == other.tile_row
            && self.tile_col == other.tile_col
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCoordContainer {
    rows: usize,
    cols: usize,
    block_rows: usize,
    block_cols: usize,
    tiles: Vec<Tile>,
}

impl BlockCoordContainer {
    pub fn from_parts(
        rows: usize,
        cols: usize,
        block_rows: usize,
        block_cols: usize,
        tiles: Vec<Tile>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::DegenerateShape { rows, cols });
        }
        if block_rows == 0
            || block_cols == 0
            || block_rows > u16::MAX as usize
            || block_cols > u16::MAX as usize
        {
            return Err(Error::InvalidParameter(format!(
                "tile dimensions {block_rows}x{block_cols} must be in [1, 65535]"
            )));
        }
        let c = BlockCoordContainer {
            rows,
            cols,
            block_rows,
            block_cols,
            tiles,
        };
        let (tr_max, tc_max) = (rows.div_ceil(block_rows), cols.div_ceil(block_cols));
        let mut prev: Option<(u32, u32)> = None;
        for t in &c.tiles {
            let key = (t.tile_row, t.tile_col);
            if prev.is_some_and(|p| p >= key) {
                return Err(Error::CorruptStream(format!(
                    "tile {key:?} is not after {:?}",
                    prev.unwrap()
                )));
            }
            if t.tile_row as usize >= tr_max || t.tile_col as usize >= tc_max {
                return Err(Error::CorruptStream(format!(
                    "tile {key:?} outside the grid"
                )));
            }
            let (h, w) = c.tile_dims(t);
            if t.values.len() != h * w {
                return Err(Error::CorruptStream(format!(
                    "tile {key:?} carries {} values, expected {}",
                    t.values.len(),
                    h * w
                )));
            }
            prev = Some(key);
        }
        Ok(c)
    }

    pub fn block_dims(&self) -> (usize, usize) {
        (self.block_rows, self.block_cols)
    }

    pub fn tiles(&self) -> &[Tile] {
        &self.tiles
    }

    fn tile_origin(&self, t: &Tile) -> (usize, usize) {
        (
            t.tile_row as usize * self.block_rows,
            t.tile_col as usize * self.block_cols,
        )
    }

    /// Actual (height, width) of a tile, clipped at the matrix edge.
    fn tile_dims(&self, t: &Tile) -> (usize, usize) {
        let (r0, c0) = self.tile_origin(t);
        (
            self.block_rows.min(self.rows - r0),
            self.block_cols.min(self.cols - c0),
        )
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut rd = ByteReader::new(buf);
        rd.magic(BLOCK_MAGIC)?;
        rd.version(CONTAINER_VERSION)?;
        let rows = rd.u32()? as usize;
        let cols = rd.u32()? as usize;
        let block_rows = rd.u16()? as usize;
        let block_cols = rd.u16()? as usize;
        let count = rd.u32()? as usize;
        if rows == 0 || cols == 0 {
            return Err(Error::DegenerateShape { rows, cols });
        }
        if block_rows == 0 || block_cols == 0 {
            return Err(Error::CorruptStream("zero tile dimension".into()));
        }
        let mut tiles = Vec::with_capacity(count.min(rd.remaining() / 8));
        for _ in 0..count {
            let tile_row = rd.u32()?;
            let tile_col = rd.u32()?;
            let r0 = tile_row as usize * block_rows;
            let c0 = tile_col as usize * block_cols;
            if r0 >= rows || c0 >= cols {
                return Err(Error::CorruptStream(format!(
                    "tile ({tile_row}, {tile_col}) outside the grid"
                )));
            }
            let n = block_rows.min(rows - r0) * block_cols.min(cols - c0);
            let values = rd.f32s(n)?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::CorruptStream("non-finite tile value".into()));
            }
            tiles.push(Tile {
                tile_row,
                tile_col,
                values,
            });
        }
        rd.finish()?;
        Self::from_parts(rows, cols, block_rows, block_cols, tiles)
    }
}

/// Stores every tile holding at least one retained weight, with the
/// masked values of its elements.
pub fn block_encode(
    m: &WeightMatrix,
    k: &PruneMask,
    block_rows: usize,
    block_cols: usize,
) -> Result<BlockCoordContainer> {
    k.ensure_matches(m)?;
    if block_rows == 0 || block_cols == 0 {
        return Err(Error::InvalidParameter(
            "tile dimensions must be at least 1".into(),
        ));
    }
    let mut tiles = Vec::new();
    for tr in 0..m.rows().div_ceil(block_rows) {
        let (r0, r1) = (tr * block_rows, ((tr + 1) * block_rows).min(m.rows()));
        for tc in 0..m.cols().div_ceil(block_cols) {
            let (c0, c1) = (tc * block_cols, ((tc + 1) * block_cols).min(m.cols()));
            if (r0..r1).all(|r| k.row_range_popcount(r, c0, c1) == 0) {
                continue;
            }
            let mut values = Vec::with_capacity((r1 - r0) * (c1 - c0));
            for r in r0..r1 {
                for c in c0..c1 {
                    values.push(if k.get(r, c) { m.get(r, c) } else { 0.0 });
                }
            }
            tiles.push(Tile {
                tile_row: dim_u32(tr)?,
                tile_col: dim_u32(tc)?,
                values,
            });
        }
    }
    BlockCoordContainer::from_parts(m.rows(), m.cols(), block_rows, block_cols, tiles)
}

pub fn block_decode(c: &BlockCoordContainer) -> Result<WeightMatrix> {
    let mut data = vec![0.0f32; c.rows * c.cols];
    for t in &c.tiles {
        let (r0, c0) = c.tile_origin(t);
        let (h, w) = c.tile_dims(t);
        for i in 0..h {
            let dst = (r0 + i) * c.cols + c0;
            data[dst..dst + w].copy_from_slice(&t.values[i * w..(i + 1) * w]);
        }
    }
    WeightMatrix::new(c.rows, c.cols, data)
}

impl SparseContainer for BlockCoordContainer {
    fn kind(&self) -> FormatKind {
        FormatKind::Block
    }

    fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn decode(&self) -> Result<WeightMatrix> {
        block_decode(self)
    }

    fn spmv(&self, x: &[f32]) -> Result<Vec<f64>> {
        check_activations(x, self.cols, self.rows)?;
        let mut y = vec![0.0f64; self.rows];
        // Tiles are sorted by (tile-row, tile-col), so each row sees its
        // columns in ascending order.
        for t in &self.tiles {
            let (r0, c0) = self.tile_origin(t);
            let (h, w) = self.tile_dims(t);
            for i in 0..h {
                let vals = &t.values[i * w..(i + 1) * w];
                y[r0 + i] = vals
                    .iter()
                    .zip(&x[c0..c0 + w])
                    .fold(y[r0 + i], |acc, (&v, &xi)| acc + v as f64 * xi as f64);
            }
        }
        Ok(y)
    }

    fn retained(&self) -> usize {
        self.stored_weights()
    }

    fn stored_weights(&self) -> usize {
        self.tiles.iter().map(|t| t.values.len()).sum()
    }

    fn index_count(&self) -> usize {
        self.tiles.len()
    }

    fn index_bits(&self) -> usize {
        self.tiles.len() * TILE_INDEX_BITS
    }

    fn index_bytes(&self) -> usize {
        self.index_bits() / 8
    }

    fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::with_capacity(22 + self.index_bytes() + 4 * self.stored_weights());
        w.bytes(BLOCK_MAGIC)
            .u16(CONTAINER_VERSION)
            .u32(dim_u32(self.rows)?)
            .u32(dim_u32(self.cols)?)
            .u16(self.block_rows as u16)
            .u16(self.block_cols as u16)
            .u32(dim_u32(self.tiles.len())?);
        for t in &self.tiles {
            w.u32(t.tile_row).u32(t.tile_col).f32s(&t.values);
        }
        Ok(w.into_inner())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::block_prune_mask;
    use crate::tensor_io::{apply_mask, gen_synthetic, WeightDist};

    #[test]
    fn single_tile() {
        let m = WeightMatrix::new(4, 4, (1..=16).map(|v| v as f32).collect()).unwrap();
        let k = PruneMask::from_fn(4, 4, |r, c| r < 2 && c < 2).unwrap();
        let c = block_encode(&m, &k, 2, 2).unwrap();
        assert_eq!(c.tiles().len(), 1);
        assert_eq!((c.tiles()[0].tile_row, c.tiles()[0].tile_col), (0, 0));
        assert_eq!(c.tiles()[0].values, vec![1., 2., 5., 6.]);
        assert_eq!(c.to_bytes().unwrap().len(), 22 + 8 + 16);
        assert!(block_decode(&c)
            .unwrap()
            .bit_eq(&apply_mask(&m, &k).unwrap()));
    }

    #[test]
    fn two_tiles_in_order() {
        let m = gen_synthetic(
            8,
            8,
            WeightDist::Gaussian {
                mean: 0.0,
                std: 1.0,
            },
            11,
        )
        .unwrap();
        let k = block_prune_mask(&m, 4, 4, 0.5).unwrap();
        let c = block_encode(&m, &k, 4, 4).unwrap();
        let coords: Vec<(u32, u32)> = c.tiles().iter().map(|t| (t.tile_row, t.tile_col)).collect();
        // Brute-force enumeration of the quadrants the mask covers.
        let want: Vec<(u32, u32)> = (0..2)
            .flat_map(|tr| (0..2).map(move |tc| (tr, tc)))
            .filter(|&(tr, tc)| k.get(tr as usize * 4, tc as usize * 4))
            .collect();
        assert_eq!(coords, want);
        assert_eq!(coords.len(), 2);
    }

    #[test]
    fn partial_edge_tiles() {
        let m = gen_synthetic(
            5,
            7,
            WeightDist::Gaussian {
                mean: 0.0,
                std: 1.0,
            },
            2,
        )
        .unwrap();
        let k = PruneMask::from_fn(5, 7, |r, c| r == 4 || c == 6).unwrap();
        let c = block_encode(&m, &k, 2, 3).unwrap();
        let back = BlockCoordContainer::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(block_decode(&back)
            .unwrap()
            .bit_eq(&apply_mask(&m, &k).unwrap()));
        let corner = c
            .tiles()
            .iter()
            .find(|t| (t.tile_row, t.tile_col) == (2, 2))
            .unwrap();
        assert_eq!(corner.values.len(), 1);
    }

    #[test]
    fn unordered_tiles_rejected() {
        let t = |r, c| Tile {
            tile_row: r,
            tile_col: c,
            values: vec![0.0; 4],
        };
        assert!(BlockCoordContainer::from_parts(4, 4, 2, 2, vec![t(0, 1), t(0, 0)]).is_err());
        assert!(BlockCoordContainer::from_parts(4, 4, 2, 2, vec![t(0, 1), t(0, 1)]).is_err());
        assert!(BlockCoordContainer::from_parts(4, 4, 2, 2, vec![t(2, 0)]).is_err());
        assert!(BlockCoordContainer::from_parts(4, 4, 2, 2, vec![t(0, 0), t(1, 1)]).is_ok());
    }
}
