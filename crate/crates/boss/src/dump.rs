//! Pseudo-label dump files. Each file is a `u64` record count followed by
//! little-endian values; the files are parallel and sorted by confidence
//! descending, pool index ascending.
//!
//! - `pseudo_labels.bin`: `u16` predicted class
//! - `confidences.bin`: `f64` max softmax probability
//! - `true_labels.bin`: `u16` audit label, `u16::MAX` when unknown
//! - `indices.bin`: `u64` position in the unlabeled pool

use std::path::Path;

use boss_core::selftrain::{is_sorted, PseudoLabelRecord};

use crate::error::{AppError, Result};
use crate::store::write_atomic;

pub const LABELS: &str = "pseudo_labels.bin";
pub const CONFIDENCES: &str = "confidences.bin";
pub const TRUE_LABELS: &str = "true_labels.bin";
pub const INDICES: &str = "indices.bin";
pub const FILES: [&str; 4] = [LABELS, CONFIDENCES, TRUE_LABELS, INDICES];

const UNKNOWN: u16 = u16::MAX;

fn file<const W: usize>(records: &[PseudoLabelRecord], value: impl Fn(&PseudoLabelRecord) -> [u8; W]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + W * records.len());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        out.extend_from_slice(&value(r));
    }
    out
}

/// Encoded contents of the four files, in [`FILES`] order.
pub fn encode(records: &[PseudoLabelRecord]) -> Result<[Vec<u8>; 4]> {
    if !is_sorted(records) {
        return Err(boss_core::Error::Data("dump records are not in dump order".into()).into());
    }
    for r in records {
        if r.label >= UNKNOWN as usize || r.true_label.is_some_and(|t| t >= UNKNOWN as usize) {
            return Err(boss_core::Error::Data(format!("class id of record {} does not fit u16", r.index)).into());
        }
    }
    Ok([
        file(records, |r| (r.label as u16).to_le_bytes()),
        file(records, |r| r.confidence.to_le_bytes()),
        file(records, |r| r.true_label.map_or(UNKNOWN, |t| t as u16).to_le_bytes()),
        file(records, |r| (r.index as u64).to_le_bytes()),
    ])
}

fn values<const W: usize>(name: &str, bytes: &[u8]) -> Result<Vec<[u8; W]>> {
    if bytes.len() < 8 {
        return Err(AppError::Format(format!("{name}: missing record count")));
    }
    let count = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let body = &bytes[8..];
    if (body.len() / W) as u64 != count || body.len() % W != 0 {
        return Err(AppError::Format(format!("{name}: header says {count} records, body holds {} bytes", body.len())));
    }
    Ok(body.chunks_exact(W).map(|c| c.try_into().expect("W bytes")).collect())
}

/// Decodes the four files (in [`FILES`] order).
pub fn decode(files: [&[u8]; 4]) -> Result<Vec<PseudoLabelRecord>> {
    let labels = values::<2>(LABELS, files[0])?;
    let conf = values::<8>(CONFIDENCES, files[1])?;
    let truth = values::<2>(TRUE_LABELS, files[2])?;
    let idx = values::<8>(INDICES, files[3])?;
    let n = labels.len();
    if conf.len() != n || truth.len() != n || idx.len() != n {
        return Err(AppError::Format("dump files have different record counts".into()));
    }
    let records: Vec<PseudoLabelRecord> = (0..n)
        .map(|i| {
            let t = u16::from_le_bytes(truth[i]);
            PseudoLabelRecord {
                index: u64::from_le_bytes(idx[i]) as usize,
                label: u16::from_le_bytes(labels[i]) as usize,
                confidence: f64::from_le_bytes(conf[i]),
                true_label: (t != UNKNOWN).then_some(t as usize),
            }
        })
        .collect();
    if !is_sorted(&records) {
        return Err(AppError::Format("dump records are not in dump order".into()));
    }
    Ok(records)
}

pub fn write(dir: &Path, records: &[PseudoLabelRecord]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, bytes) in FILES.iter().zip(encode(records)?) {
        write_atomic(&dir.join(name), &bytes)?;
    }
    Ok(())
}

pub fn exists(dir: &Path) -> bool {
    FILES.iter().all(|f| dir.join(f).is_file())
}

/// Reads a dump; a missing file is a sequencing error (dump not produced yet).
pub fn read(dir: &Path) -> Result<Vec<PseudoLabelRecord>> {
    if !exists(dir) {
        return Err(boss_core::Error::Sequencing(format!("no pseudo-label dump in {}", dir.display())).into());
    }
    let [a, b, c, d] = FILES.map(|f| std::fs::read(dir.join(f)));
    decode([&a?, &b?, &c?, &d?])
}
