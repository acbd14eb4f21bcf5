//! Flat binary parameter archive.
//!
//! Layout, all integers little-endian:
//! `b"GRADIAP1"`, `u64` init seed, `u32` length + JSON model config,
//! `u32` tensor count, then per tensor `u32` name length + UTF-8 name,
//! `u32` rank and `rank × u64` dims; after the header every tensor's
//! row-major `f64` data in order.

use std::path::Path;

use gradia_core::model::{ModelConfig, ParamTensor, Parameters};

use crate::error::{read_required, write_file, Result, WorkbenchError};

const MAGIC: &[u8; 8] = b"GRADIAP1";

pub fn encode_params(params: &Parameters) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    out.extend(params.seed().to_le_bytes());
    let config = serde_json::to_vec(params.config()).map_err(|e| WorkbenchError::Runtime(e.to_string()))?;
    out.extend((config.len() as u32).to_le_bytes());
    out.extend(config);
    out.extend((params.tensors().len() as u32).to_le_bytes());
    for t in params.tensors() {
        out.extend((t.name.len() as u32).to_le_bytes());
        out.extend(t.name.as_bytes());
        out.extend((t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend((d as u64).to_le_bytes());
        }
    }
    for t in params.tensors() {
        for v in &t.data {
            out.extend(v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| WorkbenchError::Config("parameter archive is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<Parameters> {
    let bad = |m: String| WorkbenchError::Config(format!("bad parameter archive: {m}"));
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(bad("wrong magic".into()));
    }
    let seed = r.u64()?;
    let n = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(n)?).map_err(|e| bad(e.to_string()))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| bad(e.to_string()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        tensors.push(ParamTensor {
            name,
            shape,
            data: Vec::new(),
        });
    }
    for t in &mut tensors {
        let len = t
            .shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad("tensor size overflows".into()))?;
        let raw = r.take(len.checked_mul(8).ok_or_else(|| bad("tensor size overflows".into()))?)?;
        t.data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Parameters::from_tensors(config, tensors, seed)?)
}

pub fn write_params(path: &Path, params: &Parameters) -> Result<()> {
    write_file(path, encode_params(params)?)
}

pub fn read_params(path: &Path, what: &str) -> Result<Parameters> {
    decode_params(&read_required(path, what)?)
}
