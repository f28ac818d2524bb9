//! Weight checkpoints.
//!
//! ```text
//! "ADWT" | u32 version=1 | u16 name_len | name | u32 tensor_count
//! per tensor: u8 rank | rank x u32 dims | prod(dims) x f32
//! ```
//!
//! An optional `"ADMS" | u32 len | JSON` trailer carries [`CheckpointMeta`]
//! so that a checkpoint names the model, its feature templates and whether it
//! holds head weights only.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{AdamError, Result};
use crate::wire::Reader;

pub const MAGIC: &[u8; 4] = b"ADWT";
pub const VERSION: u32 = 1;
const TRAILER_MAGIC: &[u8; 4] = b"ADMS";
const MAX_RANK: usize = 8;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: String,
    pub scale: String,
    pub templates: Vec<String>,
    pub head_only: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub name: String,
    pub tensors: Vec<Tensor>,
    pub meta: Option<CheckpointMeta>,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let name = ck.name.as_bytes();
    let len = u16::try_from(name.len())
        .map_err(|_| AdamError::InvalidArgument("model name too long".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name);
    let count = u32::try_from(ck.tensors.len())
        .map_err(|_| AdamError::InvalidArgument("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for t in &ck.tensors {
        if t.rank() > MAX_RANK {
            return Err(AdamError::InvalidArgument("tensor rank too large".into()));
        }
        out.push(t.rank() as u8);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| AdamError::InvalidArgument("dimension exceeds u32".into()))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if let Some(meta) = &ck.meta {
        let json = serde_json::to_vec(meta)?;
        out.extend_from_slice(TRAILER_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
    }
    Ok(out)
}

/// Decodes a checkpoint. Never panics on arbitrary input.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err(AdamError::MalformedHeader("bad checkpoint magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(AdamError::MalformedHeader(format!(
            "unsupported version {version}"
        )));
    }
    let len = r.u16("name length")? as usize;
    let name = r.string(len, "model name")?;
    let count = r.u32("tensor count")? as usize;
    // every tensor needs at least its rank byte
    if count > r.remaining() {
        return Err(AdamError::Truncated("tensor table".into()));
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = r.u8("rank")? as usize;
        if rank > MAX_RANK {
            return Err(AdamError::MalformedHeader(format!("rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| AdamError::MalformedHeader("tensor size overflows".into()))?;
        if n.saturating_mul(4) > r.remaining() {
            return Err(AdamError::Truncated("tensor data".into()));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f32("value")? as f64);
        }
        tensors.push(Tensor::new(shape, data)?);
    }
    let meta = if r.remaining() > 0 {
        if r.take(4, "trailer magic")? != TRAILER_MAGIC {
            return Err(AdamError::MalformedHeader(
                "trailing bytes after tensors".into(),
            ));
        }
        let len = r.u32("metadata length")? as usize;
        let json = r.take(len, "metadata")?;
        if r.remaining() > 0 {
            return Err(AdamError::MalformedHeader(
                "trailing bytes after metadata".into(),
            ));
        }
        Some(
            serde_json::from_slice(json)
                .map_err(|e| AdamError::MalformedHeader(format!("metadata: {e}")))?,
        )
    } else {
        None
    };
    Ok(Checkpoint {
        name,
        tensors,
        meta,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
