//! Flat parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"ELDRCKPT"
//! version  u32 (= 1)
//! width    u8  (4 = f32, 8 = f64)
//! count    u32
//! count × { name_len u32, name utf-8, ndim u32, dims u64 × ndim, data width × numel }
//! ```
//!
//! Entries are written in parameter registration order.

use std::path::Path;

use crate::autodiff::params::ParamStore;
use crate::error::{bail, Error, Result};
use crate::io::write_atomic;
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"ELDRCKPT";
const VERSION: u32 = 1;

pub fn encode<S: Scalar>(params: &ParamStore<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(S::PRECISION.byte_width() as u8);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, p) in params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
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
        if self.pos + n > self.buf.len() {
            bail!(Format, "checkpoint truncated at byte {}", self.pos);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
}

/// Parses a checkpoint into `(name, tensor)` pairs in file order.
pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<S>)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        bail!(Format, "not a parameter checkpoint (bad magic)");
    }
    let version = r.u32()?;
    if version != VERSION {
        bail!(Format, "unsupported checkpoint version {version}");
    }
    let width = usize::from(r.take(1)?[0]);
    if width != S::PRECISION.byte_width() {
        bail!(
            Format,
            "checkpoint stores {}-byte scalars, expected {}",
            width,
            S::PRECISION.byte_width()
        );
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| Error::Format(format!("parameter name is not utf-8: {e}")))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * width)?;
        let data = raw.chunks(width).map(S::read_le).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        bail!(Format, "{} trailing bytes after checkpoint", bytes.len() - r.pos);
    }
    Ok(out)
}

pub fn save<S: Scalar>(params: &ParamStore<S>, path: &Path) -> Result<()> {
    write_atomic(path, &encode(params))
}

/// Overwrites the values of `params` from a checkpoint file. Every stored
/// entry must match a registered parameter by name and shape.
pub fn load_into<S: Scalar>(params: &mut ParamStore<S>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path)?;
    restore(params, &bytes)
}

pub fn restore<S: Scalar>(params: &mut ParamStore<S>, bytes: &[u8]) -> Result<()> {
    for (name, tensor) in decode::<S>(bytes)? {
        let Some(id) = params.id(&name) else {
            bail!(Format, "checkpoint parameter {name} is not part of this model");
        };
        let slot = &mut params.get_mut(id).value;
        if slot.shape() != tensor.shape() {
            bail!(
                Format,
                "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                tensor.shape(),
                slot.shape()
            );
        }
        *slot = tensor;
    }
    Ok(())
}
