//! Little-endian byte cursor and writer shared by every file container.

use crate::error::{Error, Result};

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(Error::TruncatedPayload {
                needed: n,
                available,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if &found != expected {
            return Err(Error::BadMagic {
                expected: *expected,
                found,
            });
        }
        Ok(())
    }

    pub(crate) fn version(&mut self, expected: u16) -> Result<()> {
        let found = self.u16()?;
        if found != expected {
            return Err(Error::VersionMismatch { expected, found });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    /// Reads `n` little-endian f32 words without validating them.
    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let needed = n
            .checked_mul(4)
            .ok_or_else(|| Error::CorruptStream(format!("element count {n} overflows")))?;
        let raw = self.take(needed)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn finish(&self) -> Result<()> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(Error::CorruptStream(format!("{n} trailing bytes"))),
        }
    }
}

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub(crate) fn with_capacity(n: usize) -> Self {
        ByteWriter {
            buf: Vec::with_capacity(n),
        }
    }

    pub(crate) fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }

    pub(crate) fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub(crate) fn u16(&mut self, v: u16) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub(crate) fn u32(&mut self, v: u32) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub(crate) fn f32s(&mut self, vs: &[f32]) -> &mut Self {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub(crate) fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

/// Converts a dimension to the u32 used on disk.
pub(crate) fn dim_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidParameter(format!("dimension {v} exceeds u32")))
}
