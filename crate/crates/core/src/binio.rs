//! Little-endian byte helpers shared by the binary container formats.

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::TruncatedPayload {
                declared: (self.pos + n) as u64,
                present: self.buf.len() as u64,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.bytes(n.checked_mul(8).ok_or_else(|| overflow())?)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    /// Checks a 4-byte magic, a version byte equal to `version` and three
    /// reserved zero bytes.
    pub fn header(&mut self, path: &Path, magic: &[u8; 4], version: u8) -> Result<()> {
        let found = self.bytes(4).map_err(|_| Error::BadMagic {
            path: path.to_path_buf(),
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(self.buf).into_owned(),
        })?;
        if found != magic {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        let v = self.u8()?;
        if v != version {
            return Err(Error::BadVersion(v));
        }
        self.bytes(3)?;
        Ok(())
    }
}

fn overflow() -> Error {
    Error::Malformed("declared size overflows".into())
}

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn header(&mut self, magic: &[u8; 4], version: u8) {
        self.buf.extend_from_slice(magic);
        self.buf.push(version);
        self.buf.extend_from_slice(&[0, 0, 0]);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} exceeds u32")))
}
