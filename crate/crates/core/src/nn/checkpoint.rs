//! Binary parameter checkpoints.
//!
//! Layout (little endian): magic `PFCK`, `u32` version, `u64` seed,
//! `u32` input size, `u32` hidden size, `u32` tensor count, then per tensor
//! `u32` name length, UTF-8 name, `u32` rows, `u32` cols and `rows*cols`
//! `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::model::{ModelSpec, Params};
use super::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PFCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub fn to_bytes(params: &Params) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * params.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&params.seed.to_le_bytes());
    out.extend_from_slice(&(params.spec.input as u32).to_le_bytes());
    out.extend_from_slice(&(params.spec.hidden as u32).to_le_bytes());
    let layout = params.spec.layout();
    out.extend_from_slice(&(layout.len() as u32).to_le_bytes());
    for ((name, _), t) in layout.iter().zip(params.tensors()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols as u32).to_le_bytes());
        for x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Malformed("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Params, CheckpointError> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let seed = c.u64()?;
    let spec = ModelSpec {
        input: c.u32()? as usize,
        hidden: c.u32()? as usize,
    };
    let layout = spec.layout();
    let count = c.u32()? as usize;
    if count != layout.len() {
        return Err(CheckpointError::Malformed(format!(
            "{count} tensors, expected {}",
            layout.len()
        )));
    }
    let mut params = Params::zeros(spec, seed);
    for ((name, want), slot) in layout.iter().zip(params.tensors_mut()) {
        let len = c.u32()? as usize;
        let got = std::str::from_utf8(c.take(len)?)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        if got != *name {
            return Err(CheckpointError::Malformed(format!(
                "tensor `{got}`, expected `{name}`"
            )));
        }
        let shape = (c.u32()? as usize, c.u32()? as usize);
        if shape != *want {
            return Err(CheckpointError::Malformed(format!(
                "`{name}` is {shape:?}, expected {want:?}"
            )));
        }
        let raw = c.take(shape.0 * shape.1 * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        *slot = Tensor::from_vec(shape.0, shape.1, data);
    }
    if c.pos != buf.len() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    Ok(params)
}

pub fn save(path: impl AsRef<Path>, params: &Params) -> Result<(), CheckpointError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(params))?;
    f.sync_all()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Params, CheckpointError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    from_bytes(&buf)
}
