//! Checkpoints: the `SLCK` layout.
//!
//! Little-endian: `SLCK`, `u32` version, `u32` length and UTF-8 text of the
//! model config, a parameter section and a buffer section, then a `u8`
//! flag and, when set, averaged parameter and buffer sections. A section
//! is a `u32` count of blobs; a blob is `u32` name length, UTF-8 name,
//! `u32` rank, `u32` extents and the `f32` values.

use std::fs;
use std::path::Path;

use slnet_core::{Model, ModelConfig, ParamStore, Tensor};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"SLCK";
pub const VERSION: u32 = 1;

/// A trained model with its optional averaged weights.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub ema: Option<ParamStore<f32>>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| CliError::Data(format!("{v} does not fit a 32-bit field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_blob(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len())?;
    for &d in t.shape() {
        put_u32(out, d)?;
    }
    t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    Ok(())
}

fn put_store(out: &mut Vec<u8>, store: &ParamStore<f32>) -> Result<()> {
    put_u32(out, store.params().len())?;
    for p in store.params() {
        put_blob(out, &p.name, &p.value)?;
    }
    put_u32(out, store.buffers().len())?;
    for b in store.buffers() {
        put_blob(out, &b.name, &b.value)?;
    }
    Ok(())
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    let text = ckpt.model.config().to_text();
    put_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    put_store(&mut out, ckpt.model.store())?;
    match &ckpt.ema {
        Some(ema) => {
            out.push(1);
            put_store(&mut out, ema)?;
        }
        None => out.push(0),
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                format!(
                    "truncated at byte {}: {what} needs {n} bytes, {} remain",
                    self.pos,
                    self.bytes.len() - self.pos
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")) as usize)
    }

    fn text(&mut self, what: &str) -> Result<&'a str, String> {
        let at = self.pos;
        let n = self.u32(what)?;
        std::str::from_utf8(self.take(n, what)?).map_err(|_| format!("{what} at byte {at} is not UTF-8"))
    }

    fn blob(&mut self) -> Result<(String, Tensor<f32>), String> {
        let name = self.text("blob name")?.to_string();
        let rank = self.u32("blob rank")?;
        let shape: Vec<usize> = (0..rank).map(|_| self.u32("blob extent")).collect::<Result<_, _>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or("blob size overflows")?;
        let raw = self.take(len.checked_mul(4).ok_or("blob size overflows")?, "blob values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| format!("blob `{name}`: {e}"))?;
        Ok((name, t))
    }

    /// Reads a section into `store`, which fixes the expected names and
    /// shapes.
    fn store_into(&mut self, store: &mut ParamStore<f32>) -> Result<(), String> {
        let n = self.u32("parameter count")?;
        if n != store.params().len() {
            return Err(format!(
                "{n} parameters stored, architecture has {}",
                store.params().len()
            ));
        }
        for p in store.params_mut() {
            let at = self.pos;
            let (name, t) = self.blob()?;
            if name != p.name || t.shape() != p.value.shape() {
                return Err(format!(
                    "blob at byte {at} is `{name}` {:?}, expected `{}` {:?}",
                    t.shape(),
                    p.name,
                    p.value.shape()
                ));
            }
            p.value = t;
        }
        let n = self.u32("buffer count")?;
        if n != store.buffers().len() {
            return Err(format!(
                "{n} buffers stored, architecture has {}",
                store.buffers().len()
            ));
        }
        for b in store.buffers_mut() {
            let at = self.pos;
            let (name, t) = self.blob()?;
            if name != b.name || t.shape() != b.value.shape() {
                return Err(format!(
                    "blob at byte {at} is `{name}` {:?}, expected `{}` {:?}",
                    t.shape(),
                    b.name,
                    b.value.shape()
                ));
            }
            b.value = t;
        }
        Ok(())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, String> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(format!("bad magic at byte 0: expected {MAGIC:?}, found {magic:?}"));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(format!("unsupported version {version} at byte 4"));
    }
    let cfg = ModelConfig::from_text(r.text("config")?).map_err(|e| e.to_string())?;
    let mut model = Model::<f32>::new(cfg, 0).map_err(|e| e.to_string())?;
    r.store_into(model.store_mut())?;
    let ema = match r.take(1, "average flag")?[0] {
        0 => None,
        1 => {
            let mut shadow = model.store().clone();
            r.store_into(&mut shadow)?;
            Some(shadow)
        }
        f => return Err(format!("average flag {f} at byte {} must be 0 or 1", r.pos - 1)),
    };
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes after byte {}", bytes.len() - r.pos, r.pos));
    }
    Ok(Checkpoint { model, ema })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode(ckpt)?).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|d| CliError::format(path, d))
}
