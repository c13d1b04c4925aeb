//! Length-prefixed frames: type u16, flags u16, payload length u64, payload.

use byteorder::{ByteOrder, LittleEndian};

use crate::error::{ensure, Error, Result};

pub const HEADER_LEN: usize = 12;
pub const MAX_PAYLOAD: u64 = 1 << 30;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub kind: u16,
    pub flags: u16,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn encode(&self) -> Result<Vec<u8>> {
        ensure!(
            (self.payload.len() as u64) <= MAX_PAYLOAD,
            Error::Format(format!("payload of {} bytes exceeds 1 GiB", self.payload.len()))
        );
        let mut out = vec![0u8; HEADER_LEN + self.payload.len()];
        LittleEndian::write_u16(&mut out[0..2], self.kind);
        LittleEndian::write_u16(&mut out[2..4], self.flags);
        LittleEndian::write_u64(&mut out[4..12], self.payload.len() as u64);
        out[HEADER_LEN..].copy_from_slice(&self.payload);
        Ok(out)
    }

    /// Parse a header, returning (kind, flags, payload length).
    pub fn parse_header(h: &[u8]) -> Result<(u16, u16, u64)> {
        ensure!(h.len() >= HEADER_LEN, Error::Format("short frame header".into()));
        let len = LittleEndian::read_u64(&h[4..12]);
        ensure!(
            len <= MAX_PAYLOAD,
            Error::Format(format!("frame length {len} exceeds 1 GiB"))
        );
        Ok((LittleEndian::read_u16(&h[0..2]), LittleEndian::read_u16(&h[2..4]), len))
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame> {
        let (kind, flags, len) = Frame::parse_header(bytes)?;
        ensure!(
            bytes.len() as u64 == HEADER_LEN as u64 + len,
            Error::Format("frame length does not match header".into())
        );
        Ok(Frame {
            kind,
            flags,
            payload: bytes[HEADER_LEN..].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let f = Frame {
            kind: 0x10,
            flags: 0,
            payload: vec![1, 2, 3],
        };
        let b = f.encode().unwrap();
        assert_eq!(b.len(), 15);
        assert_eq!(Frame::decode(&b).unwrap(), f);
    }

    #[test]
    fn oversized_length_rejected() {
        let mut h = [0u8; 12];
        LittleEndian::write_u64(&mut h[4..12], (1 << 30) + 1);
        assert!(Frame::parse_header(&h).is_err());
    }
}
