//! Binary checkpoints.
//!
//! Layout (little endian): 8-byte magic, `u32` version, `u32` length and
//! JSON bytes of the [`ModelConfig`], `u32` tensor count, then per tensor a
//! `u32` name length, UTF-8 name, `u32` rows, `u32` cols and `rows * cols`
//! `f64` values in row-major order.

use std::path::Path;

use ndarray::Array2;

use super::net::{Model, ModelConfig};
use super::params::ParamStore;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"KSIMCKPT";
const VERSION: u32 = 1;

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * model.num_weights() + 4096);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&model.config).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.u32()?;
    let config: ModelConfig =
        serde_json::from_slice(r.take(n)?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    config.validate()?;
    let layout = Model::new(config, 0)?;
    let count = r.u32()?;
    if count != layout.params.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {count}", layout.params.len())));
    }
    let mut params = ParamStore::default();
    for i in 0..count {
        let n = r.u32()?;
        let name = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let (rows, cols) = (r.u32()?, r.u32()?);
        if name != layout.params.name(i) || (rows, cols) != layout.params.tensor(i).dim() {
            return Err(Error::Checkpoint(format!("unexpected tensor {name} [{rows}x{cols}]")));
        }
        let data = r.take(rows * cols * 8)?;
        let values = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.insert(name, Array2::from_shape_vec((rows, cols), values).expect("shape checked"));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    if !params.all_finite() {
        return Err(Error::Checkpoint("non-finite weights".into()));
    }
    Ok(Model { config, params })
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
