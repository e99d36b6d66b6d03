//! Versioned binary checkpoints for model parameters.
//!
//! Layout: the magic bytes `IVRC`, a little-endian `u32` format version, the
//! five model dimensions as `u64`, a segment descriptor table (name length,
//! UTF-8 name, value count), then every segment's values as little-endian
//! `f64` in declaration order. Loading verifies the descriptor table against
//! the layout implied by the dimensions, so a checkpoint cannot silently
//! reinterpret values.

use std::fs;
use std::path::Path;

use super::{ModelDims, ModelParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"IVRC";
const VERSION: u32 = 1;

/// Serialises the model to `path`.
pub fn save_model(path: &Path, params: &ModelParams) -> Result<()> {
    let dims = params.dims();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for dim in [
        dims.num_users as u64,
        dims.num_items as u64,
        dims.embed_dim as u64,
        dims.content_dim as u64,
        dims.attn_hidden as u64,
    ] {
        out.extend_from_slice(&dim.to_le_bytes());
    }
    let layout = params.vector().layout();
    let names: Vec<&str> = layout.segment_names().collect();
    out.extend_from_slice(&(names.len() as u32).to_le_bytes());
    for name in &names {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let len = layout.range(name)?.len() as u64;
        out.extend_from_slice(&len.to_le_bytes());
    }
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".to_string()));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Loads a model written by [`save_model`].
pub fn load_model(path: &Path) -> Result<ModelParams> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic, not a model checkpoint",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let dims = ModelDims {
        num_users: r.u64()? as usize,
        num_items: r.u64()? as usize,
        embed_dim: r.u64()? as usize,
        content_dim: r.u64()? as usize,
        attn_hidden: r.u64()? as usize,
    };
    let layout = dims.layout();
    let segment_count = r.u32()? as usize;
    let expected: Vec<&str> = layout.segment_names().collect();
    if segment_count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "segment count {segment_count} does not match layout ({})",
            expected.len()
        )));
    }
    let mut total = 0usize;
    for name in &expected {
        let name_len = r.u32()? as usize;
        let stored = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("segment name is not UTF-8".to_string()))?;
        if stored != *name {
            return Err(Error::Checkpoint(format!(
                "segment {stored:?} does not match expected {name:?}"
            )));
        }
        let len = r.u64()? as usize;
        if len != layout.range(name)?.len() {
            return Err(Error::Checkpoint(format!(
                "segment {name:?} has {len} values, layout expects {}",
                layout.range(name)?.len()
            )));
        }
        total += len;
    }
    let mut values = Vec::with_capacity(total);
    for _ in 0..total {
        values.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after values".to_string()));
    }
    ModelParams::from_flat(dims, values)
}
