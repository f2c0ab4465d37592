//! Checkpoint encoding.
//!
//! Model file layout (all integers little-endian):
//! magic `XFMR`, format version `u32`, config as length-prefixed JSON,
//! parameter count `u32`, then per parameter: path (`u16` length + UTF-8),
//! rank `u8`, extents (`u32` each), values (`f32` each), and a trailing
//! CRC32 (IEEE) over every preceding byte. Loading rejects mismatched
//! magic, version, or checksum.
//!
//! Optimizer state uses the same record scheme under the `XOPT` magic with
//! the step counter and iteration number up front.

use std::path::Path;

use crate::error::{Result, XError};
use crate::network::{build, collect_params, ModelParams, XformerConfig};
use crate::tensor::{Scalar, Tensor};
use crate::train::OptimizerState;

pub const MODEL_MAGIC: &[u8; 4] = b"XFMR";
pub const OPT_MAGIC: &[u8; 4] = b"XOPT";
pub const FORMAT_VERSION: u32 = 1;

fn crc32(data: &[u8]) -> u32 {
    // IEEE polynomial, table-free bitwise form
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        Writer { buf }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes_u32(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }

    fn path(&mut self, s: &str) {
        let b = s.as_bytes();
        self.buf.extend_from_slice(&(b.len() as u16).to_le_bytes());
        self.buf.extend_from_slice(b);
    }

    fn values<T: Scalar>(&mut self, t: &Tensor<T>) {
        t.with_data(|d| {
            for v in d {
                self.buf
                    .extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        });
    }

    fn record<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        self.path(name);
        self.buf.push(t.shape().len() as u8);
        for &e in t.shape() {
            self.u32(e as u32);
        }
        self.values(t);
    }

    fn finish(mut self, path: &Path) -> Result<()> {
        let crc = crc32(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        std::fs::write(path, &self.buf).map_err(|e| XError::io(path.display().to_string(), e))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn open(buf: &'a [u8], magic: &[u8; 4], path: &Path) -> Result<Self> {
        let p = path.display().to_string();
        if buf.len() < 12 {
            return Err(XError::Checkpoint(format!("{p}: truncated file")));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32(body) != stored {
            return Err(XError::Checkpoint(format!("{p}: CRC mismatch")));
        }
        if &body[..4] != magic {
            return Err(XError::Checkpoint(format!(
                "{p}: bad magic {:?}",
                &body[..4.min(body.len())]
            )));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(XError::Checkpoint(format!(
                "{p}: unsupported format version {version}"
            )));
        }
        Ok(Reader {
            buf: body,
            pos: 8,
            path: p,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(XError::Checkpoint(format!("{}: truncated record", self.path)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| XError::Checkpoint(format!("{}: invalid path string", self.path)))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn record(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let name = self.string()?;
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel = shape.iter().product();
        let values = self.f32s(numel)?;
        Ok((name, shape, values))
    }
}

/// Writes the model (config + every named parameter) to `path`.
pub fn save_model<T: Scalar>(m: &ModelParams<T>, path: &Path) -> Result<()> {
    let mut w = Writer::new(MODEL_MAGIC);
    let cfg = serde_json::to_vec(&m.config)
        .map_err(|e| XError::Checkpoint(format!("config encode: {e}")))?;
    w.bytes_u32(&cfg);
    let params = collect_params(m);
    w.u32(params.len() as u32);
    for (name, t) in &params {
        w.record(name, t);
    }
    w.finish(path)
}

/// Reads a model checkpoint: rebuilds the stored config, then overwrites
/// every parameter from the records. All stored parameters must exist with
/// matching shapes, and none may be missing.
pub fn load_model(path: &Path) -> Result<ModelParams<f32>> {
    let bytes =
        std::fs::read(path).map_err(|e| XError::io(path.display().to_string(), e))?;
    let mut r = Reader::open(&bytes, MODEL_MAGIC, path)?;
    let cfg_len = r.u32()? as usize;
    let cfg: XformerConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| XError::Checkpoint(format!("{}: config decode: {e}", path.display())))?;
    let m = build::<f32>(&cfg, 0)?;
    let mut by_name: std::collections::HashMap<String, Tensor<f32>> =
        collect_params(&m).into_iter().collect();
    let count = r.u32()? as usize;
    for _ in 0..count {
        let (name, shape, values) = r.record()?;
        let t = by_name.remove(&name).ok_or_else(|| {
            XError::Checkpoint(format!("{}: unknown parameter '{name}'", path.display()))
        })?;
        if t.shape() != shape.as_slice() {
            return Err(XError::Checkpoint(format!(
                "{}: parameter '{name}' has shape {:?}, expected {:?}",
                path.display(),
                shape,
                t.shape()
            )));
        }
        t.set_data(values)?;
    }
    if !by_name.is_empty() {
        let mut missing: Vec<String> = by_name.into_keys().collect();
        missing.sort();
        return Err(XError::Checkpoint(format!(
            "{}: missing parameters: {}",
            path.display(),
            missing.join(", ")
        )));
    }
    Ok(m)
}

/// Writes the optimizer moments plus the step/iteration counters.
pub fn save_optimizer(state: &OptimizerState<f32>, iter: u64, path: &Path) -> Result<()> {
    let mut w = Writer::new(OPT_MAGIC);
    w.u64(state.step);
    w.u64(iter);
    w.u32(state.first_moment.len() as u32);
    for (m, v) in state.first_moment.iter().zip(&state.second_moment) {
        w.u32(m.len() as u32);
        for x in m {
            w.buf.extend_from_slice(&x.to_le_bytes());
        }
        for x in v {
            w.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.finish(path)
}

/// Reads optimizer state; returns `(state, next_iteration)`.
pub fn load_optimizer(path: &Path) -> Result<(OptimizerState<f32>, u64)> {
    let bytes =
        std::fs::read(path).map_err(|e| XError::io(path.display().to_string(), e))?;
    let mut r = Reader::open(&bytes, OPT_MAGIC, path)?;
    let step = r.u64()?;
    let iter = r.u64()?;
    let count = r.u32()? as usize;
    let mut first = Vec::with_capacity(count);
    let mut second = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        first.push(r.f32s(n)?);
        second.push(r.f32s(n)?);
    }
    Ok((
        OptimizerState {
            first_moment: first,
            second_moment: second,
            step,
        },
        iter,
    ))
}
