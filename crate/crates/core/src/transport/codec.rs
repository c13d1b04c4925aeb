//! Payload helpers: little-endian word vectors and bit packing.

use byteorder::{ByteOrder, LittleEndian};

use crate::error::{ensure, Error, Result};

pub fn u64s_to_bytes(v: &[u64]) -> Vec<u8> {
    let mut out = vec![0u8; 8 * v.len()];
    LittleEndian::write_u64_into(v, &mut out);
    out
}

pub fn bytes_to_u64s(b: &[u8]) -> Result<Vec<u64>> {
    ensure!(
        b.len().is_multiple_of(8),
        Error::Format(format!("{} bytes is not a whole number of words", b.len()))
    );
    let mut out = vec![0u64; b.len() / 8];
    LittleEndian::read_u64_into(b, &mut out);
    Ok(out)
}

/// Pack values of `width` bits each, LSB first.
pub fn pack_bits(values: &[u64], width: u32) -> Vec<u8> {
    assert!((1..=64).contains(&width));
    let total = values.len() * width as usize;
    let mut out = vec![0u8; total.div_ceil(8)];
    let mut pos = 0usize;
    for &v in values {
        let mut v = if width == 64 { v } else { v & ((1u64 << width) - 1) };
        let mut left = width as usize;
        while left > 0 {
            let byte = pos / 8;
            let off = pos % 8;
            let take = (8 - off).min(left);
            out[byte] |= ((v & ((1u64 << take) - 1)) as u8) << off;
            v >>= take;
            pos += take;
            left -= take;
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], count: usize, width: u32) -> Result<Vec<u64>> {
    assert!((1..=64).contains(&width));
    let total = count * width as usize;
    ensure!(
        bytes.len() == total.div_ceil(8),
        Error::Format(format!(
            "{} bytes for {count} values of {width} bits",
            bytes.len()
        ))
    );
    let mut out = Vec::with_capacity(count);
    let mut pos = 0usize;
    for _ in 0..count {
        let mut v = 0u64;
        let mut got = 0usize;
        while got < width as usize {
            let byte = pos / 8;
            let off = pos % 8;
            let take = (8 - off).min(width as usize - got);
            let bits = (bytes[byte] >> off) as u64 & ((1u64 << take) - 1);
            v |= bits << got;
            got += take;
            pos += take;
        }
        out.push(v);
    }
    Ok(out)
}

/// Sequential reader over a payload.
pub struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(self.buf.len() >= n, Error::Format("payload truncated".into()));
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(LittleEndian::read_u16(self.take(2)?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8)?))
    }

    pub fn u64s(&mut self, n: usize) -> Result<Vec<u64>> {
        bytes_to_u64s(self.take(8 * n)?)
    }

    pub fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.buf)
    }

    pub fn finish(&self) -> Result<()> {
        ensure!(
            self.buf.is_empty(),
            Error::Format(format!("{} trailing bytes", self.buf.len()))
        );
        Ok(())
    }
}
