//! Flat binary checkpoint container. Layout (all integers little-endian):
//!
//! ```text
//! magic        5 bytes  "LGAT1"
//! config_len   u64
//! config       config_len bytes of UTF-8 key=value text (canonical order)
//! n_tensors    u32
//! n_tensors × {
//!     name_len u32, name (UTF-8)
//!     rank     u32, dims rank × u64
//!     payload  product(dims) × f64
//! }
//! ```
//!
//! Tensors appear in [`ModelWeights::tensors`] order. 32-bit models are
//! widened to f64 on save, which is exact, and narrowed again on load.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::kernel::{Real, Rng, Tensor};
use crate::model::ModelWeights;

pub const MAGIC: &[u8; 5] = b"LGAT1";

pub fn write_checkpoint<T: Real, W: Write>(w: &ModelWeights<T>, out: &mut W) -> Result<()> {
    let cfg = w.config.to_kv_text();
    out.write_all(MAGIC)?;
    out.write_all(&(cfg.len() as u64).to_le_bytes())?;
    out.write_all(cfg.as_bytes())?;
    let tensors = w.tensors();
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.f64().to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn checkpoint_bytes<T: Real>(w: &ModelWeights<T>) -> Vec<u8> {
    let mut out = Vec::new();
    write_checkpoint(w, &mut out).expect("writing to a Vec cannot fail");
    out
}

pub fn save<T: Real>(w: &ModelWeights<T>, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(w, &mut f)?;
    f.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Checkpoint(format!("{what} does not fit in memory")))
    }
}

pub fn read_checkpoint<T: Real>(bytes: &[u8]) -> Result<ModelWeights<T>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not an LGAT1 checkpoint".into()));
    }
    let cfg_len = c.len("config length")?;
    let text = std::str::from_utf8(c.take(cfg_len, "config")?)
        .map_err(|e| Error::Checkpoint(format!("config is not UTF-8: {e}")))?;
    let cfg = ModelConfig::from_kv_text(text)?;
    let mut w = ModelWeights::build(&cfg, &mut Rng::new(0))?;
    let n = c.u32("tensor count")? as usize;
    let mut slots = w.tensors_mut();
    if n != slots.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {n}", slots.len())));
    }
    for (want_name, slot) in slots.iter_mut() {
        let name_len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?;
        if name != want_name {
            return Err(Error::Checkpoint(format!("expected tensor {want_name}, found {name}")));
        }
        let rank = c.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.len("dim")?);
        }
        if dims != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {dims:?}, configuration implies {:?}",
                slot.shape()
            )));
        }
        let payload = c.take(slot.len() * 8, name)?;
        let data = payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        **slot = Tensor::new(&dims, data)?;
    }
    drop(slots);
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    w.refresh_gate_tables()?;
    Ok(w.cast())
}

pub fn load<T: Real>(path: &Path) -> Result<ModelWeights<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_checkpoint(&bytes)
}
