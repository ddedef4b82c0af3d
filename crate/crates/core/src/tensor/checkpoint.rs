//! Flat binary parameter files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "IDFW" | version | tensor count
//! per tensor: name length | UTF-8 name | rank | dims... | f32 values (LE)
//! ```

use std::io::{Read, Write};

use super::{ParamStore, Real, Tensor};
use crate::error::{Result, SlamError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IDFW";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<T: Real, W: Write>(store: &ParamStore<T>, mut out: W) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.named() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for d in t.shape() {
            out.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| SlamError::Checkpoint(format!("truncated file: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<T: Real, R: Read>(mut input: R) -> Result<ParamStore<T>> {
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|e| SlamError::Checkpoint(format!("missing header: {e}")))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(SlamError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(SlamError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut input)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; len];
        input
            .read_exact(&mut name)
            .map_err(|e| SlamError::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|e| SlamError::Checkpoint(format!("tensor name is not UTF-8: {e}")))?;
        let rank = read_u32(&mut input)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut input).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        input
            .read_exact(&mut raw)
            .map_err(|e| SlamError::Checkpoint(format!("truncated data for '{name}': {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        store.add(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}
