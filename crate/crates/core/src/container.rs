//! Versioned little-endian binary container with a trailing SHA-256.
//!
//! Layout: `magic | u32 version | u64 total length | payload | sha256(magic..payload)`.

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("not a {expected} file (bad magic bytes)")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {found} (this build reads up to {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("file is truncated")]
    Truncated,
    #[error("checksum mismatch: file is corrupted")]
    Checksum,
    #[error("malformed content: {0}")]
    Malformed(String),
}

const DIGEST_LEN: usize = 32;

pub struct Encoder {
    buf: Vec<u8>,
    magic_len: usize,
}

impl Encoder {
    pub fn new(magic: &[u8], version: u32) -> Self {
        let mut buf = magic.to_vec();
        buf.extend_from_slice(&version.to_le_bytes());
        buf.extend_from_slice(&0u64.to_le_bytes());
        Self {
            buf,
            magic_len: magic.len(),
        }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }

    /// Length-prefixed byte string.
    pub fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }

    pub fn finish(mut self) -> Vec<u8> {
        let total = (self.buf.len() + DIGEST_LEN) as u64;
        self.buf[self.magic_len + 4..self.magic_len + 12].copy_from_slice(&total.to_le_bytes());
        let digest = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }
}

pub struct Decoder<'a> {
    body: &'a [u8],
    pos: usize,
    pub version: u32,
}

impl<'a> Decoder<'a> {
    /// Checks magic, version and checksum, then positions after the version.
    pub fn open(data: &'a [u8], magic: &[u8], name: &'static str, max_version: u32) -> Result<Self, FormatError> {
        if data.len() < magic.len() || &data[..magic.len()] != magic {
            return Err(FormatError::BadMagic { expected: name });
        }
        if data.len() < magic.len() + 4 {
            return Err(FormatError::Truncated);
        }
        let version = u32::from_le_bytes(data[magic.len()..magic.len() + 4].try_into().unwrap());
        if version > max_version || version == 0 {
            return Err(FormatError::UnsupportedVersion {
                found: version,
                supported: max_version,
            });
        }
        let header = magic.len() + 12;
        if data.len() < header {
            return Err(FormatError::Truncated);
        }
        let total = u64::from_le_bytes(data[magic.len() + 4..header].try_into().unwrap());
        if (data.len() as u64) < total || data.len() < header + DIGEST_LEN {
            return Err(FormatError::Truncated);
        }
        if data.len() as u64 > total {
            return Err(FormatError::Malformed(format!("{} bytes after the checksum", data.len() as u64 - total)));
        }
        let (body, digest) = data.split_at(data.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(FormatError::Checksum);
        }
        Ok(Self {
            body,
            pos: header,
            version,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated)?;
        if end > self.body.len() {
            return Err(FormatError::Truncated);
        }
        let s = &self.body[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize, FormatError> {
        usize::try_from(self.u64()?).map_err(|_| FormatError::Malformed("length overflows usize".into()))
    }

    pub fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let raw = self.take(n.checked_mul(8).ok_or(FormatError::Truncated)?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], FormatError> {
        let n = self.usize()?;
        self.take(n)
    }

    pub fn finish(self) -> Result<(), FormatError> {
        if self.pos == self.body.len() {
            Ok(())
        } else {
            Err(FormatError::Malformed(format!("{} trailing bytes", self.body.len() - self.pos)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let mut e = Encoder::new(b"TEST", 1);
        e.u32(7);
        e.f64s(&[1.5, -0.0, f64::MAX]);
        e.bytes(b"hello");
        e.finish()
    }

    #[test]
    fn round_trip() {
        let data = sample();
        let mut d = Decoder::open(&data, b"TEST", "test", 1).unwrap();
        assert_eq!(d.u32().unwrap(), 7);
        let v = d.f64s(3).unwrap();
        assert_eq!(v[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(d.bytes().unwrap(), b"hello");
        d.finish().unwrap();
    }

    #[test]
    fn rejects_damage() {
        let data = sample();
        let mut bad = data.clone();
        bad[0] = b'X';
        assert!(matches!(Decoder::open(&bad, b"TEST", "test", 1), Err(FormatError::BadMagic { .. })));
        assert_eq!(Decoder::open(&data[..10], b"TEST", "test", 1).err(), Some(FormatError::Truncated));
        assert_eq!(Decoder::open(&data[..data.len() - 3], b"TEST", "test", 1).err(), Some(FormatError::Truncated));
        let mut flipped = data.clone();
        flipped[20] ^= 1;
        assert_eq!(Decoder::open(&flipped, b"TEST", "test", 1).err(), Some(FormatError::Checksum));
        let newer = Encoder::new(b"TEST", 2).finish();
        assert!(matches!(
            Decoder::open(&newer, b"TEST", "test", 1),
            Err(FormatError::UnsupportedVersion { found: 2, .. })
        ));
    }
}
