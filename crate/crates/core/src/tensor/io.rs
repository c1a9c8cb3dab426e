//! Named-tensor container used for checkpoints and camera feature grids.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "PFTC"
//! version  u16      1
//! meta     u32 length + UTF-8 JSON
//! count    u32
//! record   u32 name length, name bytes, u32 rank, rank × u32 dims,
//!          prod(dims) × f32 payload
//! ```

use super::Tensor;

pub const MAGIC: &[u8; 4] = b"PFTC";
pub const VERSION: u16 = 1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ContainerError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported container version {0}")]
    VersionMismatch(u16),
    #[error("corrupt container: {0}")]
    Corrupt(String),
}

/// Metadata string plus named `f32` tensors, in order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub meta: String,
    pub records: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write_container(c: &Container) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(c.meta.len() as u32).to_le_bytes());
    out.extend_from_slice(c.meta.as_bytes());
    out.extend_from_slice(&(c.records.len() as u32).to_le_bytes());
    for (name, t) in &c.records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| ContainerError::Corrupt(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, ContainerError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| ContainerError::Corrupt(e.to_string()))
    }
}

pub fn read_container(bytes: &[u8]) -> Result<Container, ContainerError> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(ContainerError::VersionMismatch(version));
    }
    let mut r = Reader { buf: bytes, pos: 6 };
    let meta = r.string()?;
    let count = r.u32()?;
    let mut records = Vec::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(4).ok_or_else(|| ContainerError::Corrupt("tensor too large".into()))?)?;
        let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        records.push((name, Tensor::from_vec(&shape, data).expect("length derived from shape")));
    }
    if r.pos != bytes.len() {
        return Err(ContainerError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Container { meta, records })
}
