//! Checkpoint container: named `f64` arrays plus a metadata record.
//!
//! Layout, all integers little endian:
//!
//! ```text
//! magic    b"FRCKPT01"
//! u64      metadata length, then that many bytes of UTF-8 TOML (`Metadata`)
//! u64      tensor count
//! per tensor, in name order:
//!   u32    name length, name bytes
//!   u32    rank, then rank x u64 dimensions
//!   f64    data in row-major order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::ModelState;

pub const MAGIC: &[u8; 8] = b"FRCKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    /// Hash of the configuration that produced the checkpoint.
    pub config_hash: String,
    /// `"pretrain"` or `"finetune"`.
    pub stage: String,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Which network this is, e.g. `"student"`, `"teacher"`, `"fusion"`.
    pub network: String,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(mut out: W, state: &ModelState, meta: &Metadata) -> Result<()> {
    out.write_all(MAGIC)?;
    let meta_text = toml::to_string(meta).map_err(|e| bad(e.to_string()))?;
    out.write_all(&(meta_text.len() as u64).to_le_bytes())?;
    out.write_all(meta_text.as_bytes())?;
    out.write_all(&(state.len() as u64).to_le_bytes())?;
    for (name, t) in state.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R, n: u64, limit: u64) -> Result<Vec<u8>> {
    if n > limit {
        return Err(bad(format!("field length {n} exceeds limit {limit}")));
    }
    let mut buf = vec![0u8; n as usize];
    r.read_exact(&mut buf).map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(ModelState, Metadata)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| bad("file too short for a checkpoint"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let meta_len = read_u64(&mut input)?;
    let meta_bytes = read_bytes(&mut input, meta_len, 1 << 20)?;
    let meta_text = String::from_utf8(meta_bytes).map_err(|e| bad(e.to_string()))?;
    let meta: Metadata = toml::from_str(&meta_text).map_err(|e| bad(format!("bad metadata: {e}")))?;
    let count = read_u64(&mut input)?;
    let mut state = ModelState::new();
    for _ in 0..count {
        let name_len = read_u32(&mut input)? as u64;
        let name = String::from_utf8(read_bytes(&mut input, name_len, 4096)?).map_err(|e| bad(e.to_string()))?;
        let rank = read_u32(&mut input)?;
        if rank > 8 {
            return Err(bad(format!("tensor {name} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| read_u64(&mut input).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("shape overflow"))?;
        let raw = read_bytes(&mut input, (numel as u64) * 8, 1 << 34)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| bad(e.to_string()))?;
        if state.contains(&name) {
            return Err(bad(format!("duplicate tensor {name}")));
        }
        state.insert(name, arr);
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after last tensor"));
    }
    Ok((state, meta))
}

pub fn save(path: &Path, state: &ModelState, meta: &Metadata) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut out, state, meta)?;
    out.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelState, Metadata)> {
    let file = File::open(path).map_err(|e| bad(format!("cannot open {}: {e}", path.display())))?;
    read_checkpoint(BufReader::new(file))
}
