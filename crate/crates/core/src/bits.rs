//! LSB-first bit packing for fixed-width index streams.

/// Appends fixed-width unsigned values, least-significant bit first.
#[derive(Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bit_len: usize,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity_bits(bits: usize) -> Self {
        BitWriter {
            bytes: Vec::with_capacity(bits.div_ceil(8)),
            bit_len: 0,
        }
    }

    /// Pushes the low `width` bits of `value`. `width` may be 0.
    pub fn push(&mut self, value: u32, width: u32) {
        debug_assert!(width <= 32);
        debug_assert!(width == 32 || value >> width == 0);
        for i in 0..width {
            let bit = (value >> i) & 1;
            let byte = self.bit_len / 8;
            if byte == self.bytes.len() {
                self.bytes.push(0);
            }
            self.bytes[byte] |= (bit as u8) << (self.bit_len % 8);
            self.bit_len += 1;
        }
    }

    pub fn bit_len(&self) -> usize {
        self.bit_len
    }

    /// Returns the packed bytes; the tail of the last byte is zero.
    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

/// Reads fixed-width values written by [`BitWriter`].
#[derive(Debug)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        BitReader { bytes, pos: 0 }
    }

    /// Returns `None` if fewer than `width` bits remain.
    pub fn read(&mut self, width: u32) -> Option<u32> {
        if self.pos + width as usize > self.bytes.len() * 8 {
            return None;
        }
        let mut v = 0u32;
        for i in 0..width {
            let p = self.pos + i as usize;
            let bit = (self.bytes[p / 8] >> (p % 8)) & 1;
            v |= (bit as u32) << i;
        }
        self.pos += width as usize;
        Some(v)
    }

    pub fn position(&self) -> usize {
        self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn packs_lsb_first() {
        let mut w = BitWriter::new();
        w.push(0b1, 1);
        w.push(0b10, 2);
        w.push(0b11111, 5);
        w.push(0b101, 3);
        assert_eq!(w.bit_len(), 11);
        assert_eq!(w.into_bytes(), vec![0b1111_1101, 0b101]);
    }

    #[test]
    fn zero_width_is_empty() {
        let mut w = BitWriter::new();
        for _ in 0..10 {
            w.push(0, 0);
        }
        assert!(w.into_bytes().is_empty());
        let mut r = BitReader::new(&[]);
        assert_eq!(r.read(0), Some(0));
        assert_eq!(r.read(1), None);
    }

    proptest! {
        #[test]
        fn roundtrip(width in 0u32..=16, raw in prop::collection::vec(any::<u32>(), 0..200)) {
            let mask = if width == 0 { 0 } else { (1u32 << width) - 1 };
            let vals: Vec<u32> = raw.iter().map(|v| v & mask).collect();
            let mut w = BitWriter::new();
            for &v in &vals {
                w.push(v, width);
            }
            prop_assert_eq!(w.bit_len(), vals.len() * width as usize);
            let bytes = w.into_bytes();
            prop_assert_eq!(bytes.len(), (vals.len() * width as usize).div_ceil(8));
            let mut r = BitReader::new(&bytes);
            for &v in &vals {
                prop_assert_eq!(r.read(width), Some(v));
            }
        }
    }
}
