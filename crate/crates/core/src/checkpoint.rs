//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "HEBB" | version: u32 | tensor count: u32
//! per tensor: name length: u32 | name (UTF-8) | rank: u32 | extents: u64 × rank | payload: f64 × product(extents)
//! CRC32 (IEEE) of every payload byte, in file order: u32
//! ```

use std::path::Path;

use crate::error::{HebbError, Result};
use crate::layers::Model;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HEBB";
pub const VERSION: u32 = 1;

pub fn encode(tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut crc = crc32fast::Hasher::new();
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        let start = out.len();
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        crc.update(&out[start..]);
    }
    out.extend_from_slice(&crc.finalize().to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(HebbError::Checkpoint(format!(
                "truncated at byte {} while reading {what}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(HebbError::Checkpoint("bad magic, not a HEBB checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(HebbError::Checkpoint(format!(
            "unsupported checkpoint version {version} (this build reads {VERSION})"
        )));
    }
    let count = r.u32("tensor count")? as usize;
    let mut crc = crc32fast::Hasher::new();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| HebbError::Checkpoint(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(HebbError::Checkpoint(format!("tensor {name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| HebbError::Checkpoint(format!("tensor {name}: implausible shape {shape:?}")))?;
        let payload = r.take(n * 8, "payload")?;
        crc.update(payload);
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| HebbError::Checkpoint(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    let stored = r.u32("CRC")?;
    let actual = crc.finalize();
    if stored != actual {
        return Err(HebbError::Checkpoint(format!(
            "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    if r.pos != bytes.len() {
        return Err(HebbError::Checkpoint(format!(
            "{} trailing bytes after CRC",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

/// Writes every parameter of `model` (layer order, then parameter name).
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode(&model.named_params());
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| HebbError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| HebbError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| HebbError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        HebbError::Checkpoint(d) => HebbError::Checkpoint(format!("{}: {d}", path.display())),
        other => other,
    })
}

/// Copies checkpoint tensors into `model`. Every model parameter must be
/// present with the same shape, and nothing else may be.
pub fn apply_checkpoint(model: &mut Model, tensors: Vec<(String, Tensor)>) -> Result<()> {
    let expected: Vec<(String, Vec<usize>)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    for (name, t) in &tensors {
        match expected.iter().find(|(n, _)| n == name) {
            None => return Err(HebbError::Checkpoint(format!("tensor {name} does not exist in the model"))),
            Some((_, shape)) if shape.as_slice() != t.shape() => {
                return Err(HebbError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, model expects {shape:?}",
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    for (name, _) in &expected {
        if !tensors.iter().any(|(n, _)| n == name) {
            return Err(HebbError::Checkpoint(format!("tensor {name} missing from checkpoint")));
        }
    }
    for (name, t) in tensors {
        let (layer, param) = name.split_once('.').expect("names checked above");
        *model.layer_mut(layer)?.param_mut(param)? = t;
    }
    Ok(())
}
