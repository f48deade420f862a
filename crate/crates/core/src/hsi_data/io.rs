//! HSIB cube and MSK1 mask containers.
//!
//! HSIB: `"HSIB"`, version `u8 = 1`, three reserved zero bytes, then `M`, `N`,
//! `C` as little-endian `u32`, then `M*N*C` little-endian `f32` values with
//! each pixel's bands contiguous.
//!
//! MSK1: `"MSK1"`, `M`, `N` as little-endian `u32`, then `M*N` label bytes.

use std::path::Path;

use super::{GroundTruthMask, HsiCube};
use crate::binio::{read_file, to_u32, write_file, Reader, Writer};
use crate::error::{Error, Result};

const HSIB_MAGIC: &[u8; 4] = b"HSIB";
const HSIB_VERSION: u8 = 1;
const MASK_MAGIC: &[u8; 4] = b"MSK1";

/// Byte length of the HSIB header preceding the payload.
pub const HSIB_HEADER_LEN: usize = 20;

pub fn load_hsi(path: impl AsRef<Path>) -> Result<HsiCube> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes);
    r.header(path, HSIB_MAGIC, HSIB_VERSION)?;
    let m = r.u32()? as usize;
    let n = r.u32()? as usize;
    let c = r.u32()? as usize;
    let declared = (m as u64) * (n as u64) * (c as u64) * 4;
    if declared > r.remaining() as u64 {
        return Err(Error::TruncatedPayload {
            declared,
            present: r.remaining() as u64,
        });
    }
    let payload = r.bytes(declared as usize)?;
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    HsiCube::new(m, n, c, values)
}

pub fn save_hsi(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    let mut w = Writer::default();
    w.buf.reserve(HSIB_HEADER_LEN + cube.values().len() * 4);
    w.header(HSIB_MAGIC, HSIB_VERSION);
    w.u32(to_u32(cube.height(), "height")?);
    w.u32(to_u32(cube.width(), "width")?);
    w.u32(to_u32(cube.channels(), "channels")?);
    for v in cube.values() {
        w.bytes(&v.to_le_bytes());
    }
    write_file(path.as_ref(), &w.buf)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<GroundTruthMask> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes);
    let magic = r.bytes(4).unwrap_or(&[]);
    if magic != MASK_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "MSK1".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let m = r.u32()? as usize;
    let n = r.u32()? as usize;
    let labels = r.bytes(m * n)?.to_vec();
    GroundTruthMask::new(m, n, labels)
}

/// Writes any `M x N` grid of `{0, 1}` labels in MSK1 layout.
pub(crate) fn write_label_grid(
    height: usize,
    width: usize,
    labels: &[u8],
    path: &Path,
) -> Result<()> {
    let mut w = Writer::default();
    w.bytes(MASK_MAGIC);
    w.u32(to_u32(height, "height")?);
    w.u32(to_u32(width, "width")?);
    w.bytes(labels);
    write_file(path, &w.buf)
}

pub fn save_mask(mask: &GroundTruthMask, path: impl AsRef<Path>) -> Result<()> {
    write_label_grid(mask.height(), mask.width(), mask.labels(), path.as_ref())
}
