//! Binary checkpoint format.
//!
//! ```text
//! "STBCKPT1"
//! u32 config length, config as UTF-8 `key=value` lines
//! u32 parameter count
//! per parameter: u32 name length, name, u32 rank, u32 dims..., f32 data
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{EncoderConfig, EncoderModel, Params};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"STBCKPT1";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub(crate) fn encode_checkpoint(model: &EncoderModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let cfg = model.config().to_text();
    put_u32(&mut out, cfg.len())?;
    out.extend_from_slice(cfg.as_bytes());
    put_u32(&mut out, model.params().len())?;
    for (name, t) in model.params() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() < n {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("non UTF-8 text".into()))
    }
}

pub(crate) fn decode_checkpoint(bytes: &[u8]) -> Result<EncoderModel> {
    let mut r = Reader { bytes };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint(
            "not a model checkpoint (bad magic)".into(),
        ));
    }
    let config = EncoderConfig::from_text(&r.string()?)?;
    let count = r.u32()?;
    let mut params = Params::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if params
            .insert(name.clone(), Tensor::new(shape, data)?)
            .is_some()
        {
            return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
        }
    }
    if !r.bytes.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    EncoderModel::from_params(config, params)
}

/// Writes the encoder (config and parameters, values rounded to `f32`).
pub fn save_checkpoint(model: &EncoderModel, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EncoderModel> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}
