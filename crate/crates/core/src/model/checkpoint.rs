//! Binary checkpoint files.
//!
//! ```text
//! "MDKDCKPT" | u32 version | u32 vocab_size | u32 embed_dim | u32 hidden_dim
//! | u32 max_decode_len | u64 seed | u64 parameter count | f64 parameters...
//! ```
//! Parameters follow the flat block order of [`ModelParams`]; all values are little-endian.

use std::path::Path;

use super::{AdamState, ModelConfig, ModelParams};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MDKDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const ADAM_MAGIC: &[u8; 8] = b"MDKDADAM";

fn push_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn checkpoint_bytes(p: &ModelParams) -> Vec<u8> {
    let c = p.config();
    let mut out = Vec::with_capacity(48 + 8 * p.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for d in [c.vocab_size, c.embed_dim, c.hidden_dim, c.max_decode_len] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.seed.to_le_bytes());
    out.extend_from_slice(&(p.len() as u64).to_le_bytes());
    push_f64s(&mut out, p.as_slice());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.what, "truncated file"));
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
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.what, "size overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.what, "trailing bytes"));
        }
        Ok(())
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Cursor { bytes, pos: 0, what: "checkpoint" };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
    let config = ModelConfig::new(dims[0], dims[1], dims[2], dims[3], r.u64()?);
    let n = r.u64()? as usize;
    if n != config.num_params() {
        return Err(Error::format(
            "checkpoint",
            format!("{n} parameters recorded, config implies {}", config.num_params()),
        ));
    }
    let data = r.f64s(n)?;
    r.finish()?;
    ModelParams::from_vec(config, data)
}

pub fn save_checkpoint(path: &Path, p: &ModelParams) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(p)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

pub(crate) fn save_optimizer(path: &Path, s: &AdamState) -> Result<()> {
    let mut out = Vec::with_capacity(24 + 16 * s.m.len());
    out.extend_from_slice(ADAM_MAGIC);
    out.extend_from_slice(&s.step.to_le_bytes());
    out.extend_from_slice(&(s.m.len() as u64).to_le_bytes());
    push_f64s(&mut out, &s.m);
    push_f64s(&mut out, &s.v);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub(crate) fn load_optimizer(path: &Path) -> Result<AdamState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Cursor { bytes: &bytes, pos: 0, what: "optimizer state" };
    if r.take(8)? != ADAM_MAGIC {
        return Err(Error::format("optimizer state", "bad magic"));
    }
    let step = r.u64()?;
    let n = r.u64()? as usize;
    let m = r.f64s(n)?;
    let v = r.f64s(n)?;
    r.finish()?;
    let mut s = AdamState::new(n);
    s.step = step;
    s.m = m;
    s.v = v;
    Ok(s)
}
