//! CAPS parameter container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "CAPS" | version u8 = 1 | 3 reserved zero bytes
//! task index | tensor count
//! per tensor: name length | name bytes (UTF-8) | rank | dims... | f64 values
//! ```

use std::path::Path;

use crate::binio::{read_file, to_u32, write_file, Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CAPS";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub task: u32,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| Error::Malformed(format!("checkpoint lacks tensor {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.header(MAGIC, VERSION);
        w.u32(self.task);
        w.u32(to_u32(self.tensors.len(), "tensor count")?);
        for t in &self.tensors {
            if t.data.len() != t.shape.iter().product::<usize>() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {} holds {} values for shape {:?}",
                    t.name,
                    t.data.len(),
                    t.shape
                )));
            }
            w.u32(to_u32(t.name.len(), "name length")?);
            w.bytes(t.name.as_bytes());
            w.u32(to_u32(t.shape.len(), "rank")?);
            for &d in &t.shape {
                w.u32(to_u32(d, "dimension")?);
            }
            for &v in &t.data {
                w.f64(v);
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.header(path, MAGIC, VERSION)?;
        let task = r.u32()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.bytes(len)?)
                .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Malformed(format!("tensor {name} size overflows")))?;
            let data = r.f64_vec(n)?;
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue(i));
            }
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.remaining() != 0 {
            return Err(Error::Malformed(format!("{} trailing bytes after last tensor", r.remaining())));
        }
        Ok(Self { task, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&read_file(path)?, path)
    }
}
