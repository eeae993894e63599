//! Self-describing binary checkpoints.
//!
//! ```text
//! "MMCK" | u32 version | u32 len | header JSON | u32 count
//! count × ( u32 len | name | u8 dtype | u8 ndim | ndim × u64 | data )
//! u32 crc32 of everything above
//! ```
//! All integers and tensor payloads are little-endian.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MMCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    /// Free-form run information (step, losses, provenance of extraction).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn encode_checkpoint<S: Scalar>(params: &ModelParams<S>, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut model = params.cfg.clone();
    model.materialize_defaults();
    let header = serde_json::to_vec(&CheckpointHeader { model, meta: meta.clone() })
        .map_err(|e| Error::Format(format!("header encoding: {e}")))?;
    let mut out = Vec::with_capacity(64 + header.len() + params.store.num_elements() * S::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(params.store.len() as u32).to_le_bytes());
    for (_, name, t) in params.store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(S::DTYPE as u8);
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Integrity(format!("record overruns payload at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_values<S: Scalar>(bytes: &[u8], dtype: DType) -> Vec<S> {
    let w = dtype.size();
    match dtype {
        d if d == S::DTYPE => bytes.chunks_exact(w).map(S::read_le).collect(),
        DType::F32 => bytes.chunks_exact(w).map(|c| S::from_f64_lossy(f32::read_le(c) as f64)).collect(),
        DType::F64 => bytes.chunks_exact(w).map(|c| S::from_f64_lossy(f64::read_le(c))).collect(),
    }
}

/// Parses a checkpoint, converting stored values to `S` when needed.
pub fn decode_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<(ModelParams<S>, serde_json::Value)> {
    if bytes.len() < 16 {
        return Err(Error::Integrity(format!("checkpoint of {} bytes is truncated", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let crc = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != crc {
        return Err(Error::Integrity("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
    }
    let hlen = r.u32()? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_owned();
        let tag = r.u8()?;
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("{name}: unknown dtype tag {tag}")))?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
        let bytes_len = n.and_then(|n| n.checked_mul(dtype.size()));
        let bytes_len = bytes_len.ok_or_else(|| Error::Format(format!("{name}: shape {shape:?} overflows")))?;
        let data = read_values::<S>(r.take(bytes_len)?, dtype);
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes after tensors", body.len() - r.pos)));
    }
    let params = ModelParams::from_store(header.model, store)?;
    Ok((params, header.meta))
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    builder.permissions(std::os::unix::fs::PermissionsExt::from_mode(0o644));
    let mut tmp = builder.tempfile_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn save_checkpoint<S: Scalar>(params: &ModelParams<S>, meta: &serde_json::Value, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params, meta)?)
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(ModelParams<S>, serde_json::Value)> {
    decode_checkpoint(&std::fs::read(path)?)
}
