//! Model checkpoint serialization.
//!
//! Layout: magic, u32 LE digest length, config digest bytes, u32 LE
//! parameter count, then per parameter: u32 LE name length, UTF-8 name,
//! u32 LE rank, u32 LE dims, u64 LE value count, f32 LE values.

use std::io::{Read, Write};
use std::path::Path;

use super::{AutodiffError, Parameter, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKPT";

/// One named tensor recovered from a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn save_checkpoint(path: &Path, config_digest: &str, params: &[&Parameter]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(config_digest.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_digest.as_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(p.data.len() as u64).to_le_bytes());
        for &v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(String, Vec<CheckpointEntry>)> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    let magic = cur.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(AutodiffError::Checkpoint(format!(
            "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let digest_len = cur.u32()? as usize;
    let digest = String::from_utf8(cur.take(digest_len)?.to_vec())
        .map_err(|_| AutodiffError::Checkpoint("digest is not UTF-8".into()))?;
    let n_params = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| AutodiffError::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let count = cur.u64()? as usize;
        if count != shape.iter().product::<usize>() {
            return Err(AutodiffError::Checkpoint(format!(
                "parameter '{name}': count {count} does not match shape {shape:?}"
            )));
        }
        let raw = cur.take(count * 4)?;
        let mut data = Vec::with_capacity(count);
        for chunk in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        entries.push(CheckpointEntry { name, shape, data });
    }
    Ok((digest, entries))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(AutodiffError::Checkpoint(format!(
                "truncated at offset {}: wanted {n} more bytes",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
