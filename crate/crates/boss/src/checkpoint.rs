//! `BOSSCKPT` parameter files: the magic, a `u32` version, then one record
//! per parameter (`u32` name length, UTF-8 name, `u32` rank, `u64` dims,
//! little-endian `f64` values) until end of file.

use std::path::Path;

use boss_core::nn::Classifier;
use boss_core::Tensor;

use crate::error::{AppError, Result};

pub const MAGIC: &[u8; 8] = b"BOSSCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn records(model: &Classifier<f64>) -> Vec<ParamRecord> {
    model
        .params()
        .iter()
        .map(|p| ParamRecord { name: p.name.clone(), shape: p.value.shape().to_vec(), values: p.value.data().to_vec() })
        .collect()
}

pub fn encode(records: &[ParamRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &d in &r.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &r.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(AppError::Format(format!("checkpoint truncated at byte {}", self.pos)));
        };
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

pub fn decode(bytes: &[u8]) -> Result<Vec<ParamRecord>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(AppError::Format("not a BOSSCKPT file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(AppError::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| AppError::Format("parameter name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let bytes_needed = count.and_then(|c| c.checked_mul(8));
        let Some(bytes_needed) = bytes_needed else {
            return Err(AppError::Format(format!("parameter {name} is too large")));
        };
        let values = r.take(bytes_needed)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push(ParamRecord { name, shape, values });
    }
    Ok(out)
}

/// Copies every record into `model`; names and shapes must match exactly.
pub fn restore(model: &mut Classifier<f64>, records: &[ParamRecord]) -> Result<()> {
    if records.len() != model.params().len() {
        return Err(AppError::Format(format!(
            "checkpoint has {} parameters, model has {}",
            records.len(),
            model.params().len()
        )));
    }
    for r in records {
        model.set_param(&r.name, Tensor::new(r.shape.clone(), r.values.clone())?)?;
    }
    Ok(())
}

pub fn save(path: &Path, model: &Classifier<f64>) -> Result<()> {
    crate::store::write_atomic(path, &encode(&records(model)))
}

pub fn load(path: &Path) -> Result<Vec<ParamRecord>> {
    decode(&std::fs::read(path)?)
}
