//! Binary parameter checkpoints and averaging.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, `u32` record count,
//! then per record `u32` name length, UTF-8 name, `u32` rank, `u64` extents,
//! `f64` payload. Records are sorted by name.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PRMTCKPT";
pub const VERSION: u32 = 1;

pub fn to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// All loaded parameters are trainable.
pub fn from_bytes(buf: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("parameter name: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("extent overflow".into()))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if store.contains(&name) {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        store.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(store)
}

pub fn write_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    fs::write(path, to_bytes(store))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ParamStore> {
    from_bytes(&fs::read(path)?)
}

/// Running elementwise mean. Adding `k` identical stores reproduces the
/// store exactly.
#[derive(Debug, Default)]
pub struct CheckpointAverager {
    mean: Option<ParamStore>,
    n: usize,
}

impl CheckpointAverager {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn add(&mut self, store: &ParamStore) -> Result<()> {
        self.n += 1;
        let Some(mean) = &mut self.mean else {
            let mut first = store.clone();
            first.zero_grad();
            self.mean = Some(first);
            return Ok(());
        };
        if mean.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} differs from {}",
                store.len(),
                mean.len()
            )));
        }
        let k = self.n as f64;
        for (name, m) in mean.iter_mut() {
            let x = store.get(name).map_err(|_| Error::Checkpoint(format!("missing parameter {name}")))?;
            if x.shape() != m.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape of {name}: {:?} vs {:?}",
                    x.shape(),
                    m.shape()
                )));
            }
            for (a, &b) in m.data_mut().iter_mut().zip(x.data()) {
                *a += (b - *a) / k;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<ParamStore> {
        self.mean.ok_or_else(|| Error::Checkpoint("nothing to average".into()))
    }
}

pub fn average(stores: &[ParamStore]) -> Result<ParamStore> {
    let mut avg = CheckpointAverager::new();
    for s in stores {
        avg.add(s)?;
    }
    avg.finish()
}

pub fn average_files(paths: &[&Path]) -> Result<ParamStore> {
    let mut avg = CheckpointAverager::new();
    for p in paths {
        avg.add(&read_checkpoint(p)?)?;
    }
    avg.finish()
}
