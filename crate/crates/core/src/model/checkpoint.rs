//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "DSTQACK1"
//! version   u32
//! tok_hash  32 bytes  sha-256 of the vocab file contents
//! cfg_len   u32
//! config    cfg_len bytes of JSON (ModelConfig)
//! dtype     u8        4 = f32, 8 = f64
//! n_tensors u32
//! per tensor:
//!   name_len u16, name utf-8,
//!   ndim     u8, dims u32 × ndim,
//!   data     row-major scalars, little-endian
//! ```
//!
//! Round-trips are bit-exact; loading verifies magic, version, dtype, and —
//! when a hash is supplied — the tokenizer fingerprint.

use super::{ModelConfig, ModelParams, Scalar};
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"DSTQACK1";
const VERSION: u32 = 1;

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    params: &ModelParams<T>,
    tokenizer_hash: &[u8; 32],
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(tokenizer_hash);
    let cfg = serde_json::to_vec(&params.config)?;
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);
    buf.push(std::mem::size_of::<T>() as u8);

    let tensors = params.tensors();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, view) in tensors {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(view.ndim() as u8);
        for &d in view.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in view.iter() {
            let v = x.to_f64().unwrap();
            if std::mem::size_of::<T>() == 4 {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            } else {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::IncompatibleCheckpoint("truncated file".into()));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Load a checkpoint. When `expected_tokenizer_hash` is given, a mismatch is
/// an [`Error::IncompatibleCheckpoint`].
pub fn load_checkpoint<T: Scalar>(
    path: &Path,
    expected_tokenizer_hash: Option<&[u8; 32]>,
) -> Result<(ModelParams<T>, [u8; 32])> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader {
        data: &data,
        pos: 0,
    };

    if r.take(8)? != MAGIC {
        return Err(Error::IncompatibleCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "version {version}, expected {VERSION}"
        )));
    }
    let mut hash = [0u8; 32];
    hash.copy_from_slice(r.take(32)?);
    if let Some(expected) = expected_tokenizer_hash {
        if &hash != expected {
            return Err(Error::IncompatibleCheckpoint(
                "tokenizer hash mismatch: checkpoint was trained with a different vocabulary"
                    .into(),
            ));
        }
    }
    let cfg_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)?;
    config.validate()?;
    let dtype = r.u8()? as usize;
    if dtype != std::mem::size_of::<T>() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "stored scalar width {dtype} bytes, requested {}",
            std::mem::size_of::<T>()
        )));
    }

    let mut params = ModelParams::<T>::zeros(&config);
    if !config.learned_positions {
        params.positions = super::sinusoidal_positions(config.max_seq_len, config.hidden)?;
    }
    let n_tensors = r.u32()? as usize;
    {
        let mut views = params.tensors_mut();
        if n_tensors != views.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{n_tensors} tensors stored, config expects {}",
                views.len()
            )));
        }
        for (name, view) in views.iter_mut() {
            let name_len = r.u16()? as usize;
            let stored_name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::IncompatibleCheckpoint("bad tensor name".into()))?;
            if stored_name != name {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "tensor order mismatch: found '{stored_name}', expected '{name}'"
                )));
            }
            let ndim = r.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32()? as usize);
            }
            if dims != view.shape() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "shape mismatch for '{name}': stored {dims:?}, expected {:?}",
                    view.shape()
                )));
            }
            let count: usize = dims.iter().product();
            let raw = r.take(count * dtype)?;
            for (i, x) in view.iter_mut().enumerate() {
                *x = if dtype == 4 {
                    T::from_f64(
                        f32::from_le_bytes(raw[i * 4..i * 4 + 4].try_into().unwrap()) as f64
                    )
                } else {
                    T::from_f64(f64::from_le_bytes(raw[i * 8..i * 8 + 8].try_into().unwrap()))
                };
            }
        }
    }
    Ok((params, hash))
}
