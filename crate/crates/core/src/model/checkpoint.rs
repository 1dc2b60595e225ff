//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FARC"  u32 version
//! u32 config_len  config_len bytes of JSON (ModelConfig)
//! u32 entries
//! per entry: u32 name_len, name (utf8), u8 dtype tag (0 = f32, 1 = f64),
//!            u32 rank, rank × u64 dims, product(dims) raw scalars
//! ```
//!
//! Scalars are written in the model's own dtype, so a round-trip is bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{FarModel, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{DType, ParamStore, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"FARC";
pub const VERSION: u32 = 1;

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        reason: reason.into(),
    }
}

pub fn write_checkpoint<F: Scalar>(model: &FarModel<F>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config())?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(F::DTYPE.tag());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(bad(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

/// Parses a checkpoint. Stored scalars must have the dtype `F`.
pub fn read_checkpoint<F: Scalar>(bytes: &[u8]) -> Result<FarModel<F>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(cfg_len)?).map_err(|e| bad(format!("config: {e}")))?;
    let entries = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..entries {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| bad("parameter name is not utf-8"))?
            .to_string();
        let dtype = DType::from_tag(r.take(1)?[0]).ok_or_else(|| bad("unknown dtype tag"))?;
        if dtype != F::DTYPE {
            return Err(bad(format!("stored as {dtype:?}, requested {:?}", F::DTYPE)));
        }
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(bad(format!("rank {rank} too large")));
        }
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad("dims overflow"))?;
        let size = dtype.size_bytes();
        let raw = r.take(n.checked_mul(size).ok_or_else(|| bad("size overflow"))?)?;
        let data = raw.chunks_exact(size).map(F::read_le).collect();
        if params.id(&name).is_some() {
            return Err(bad(format!("duplicate parameter {name}")));
        }
        params.add(name, Tensor::new(dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    FarModel::from_params(config, params)
}

/// Writes atomically: temp file in the same directory, then rename.
pub fn save_checkpoint<F: Scalar>(model: &FarModel<F>, path: &Path) -> Result<()> {
    let bytes = write_checkpoint(model)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<FarModel<F>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

/// Dtype a checkpoint was written with, from its first entry.
pub fn checkpoint_dtype(bytes: &[u8]) -> Result<DType> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    r.u32()?;
    let cfg_len = r.u32()? as usize;
    r.take(cfg_len)?;
    if r.u32()? == 0 {
        return Err(bad("no entries"));
    }
    let name_len = r.u32()? as usize;
    r.take(name_len)?;
    DType::from_tag(r.take(1)?[0]).ok_or_else(|| bad("unknown dtype tag"))
}
