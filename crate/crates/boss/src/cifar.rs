//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! the 1024 red, 1024 green and 1024 blue bytes of a 32×32 image in row-major
//! order. Pixels are scaled to `[0, 1]` by dividing by 255.

use std::path::{Path, PathBuf};

use boss_core::data::{stratified_split, Dataset, ImageSet};
use boss_core::Tensor;

use crate::error::{AppError, Result};

pub const SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMAGE_BYTES: usize = CHANNELS * SIDE * SIDE;
pub const RECORD_BYTES: usize = 1 + IMAGE_BYTES;
pub const NUM_CLASSES: usize = 10;

/// Parsed records: labels plus `[M, 3, 32, 32]` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub labels: Vec<u16>,
    pub pixels: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn into_image_set(self) -> Result<ImageSet> {
        let n = self.len();
        Ok(ImageSet::new(Tensor::new(vec![n, CHANNELS, SIDE, SIDE], self.pixels)?, self.labels)?)
    }
}

pub fn parse(bytes: &[u8]) -> Result<Batch> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(AppError::Format(format!(
            "{} bytes is not a whole number of {RECORD_BYTES}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * IMAGE_BYTES);
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        if rec[0] as usize >= NUM_CLASSES {
            return Err(boss_core::Error::Data(format!("record {i} has label {}", rec[0])).into());
        }
        labels.push(rec[0] as u16);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(Batch { labels, pixels })
}

/// Inverse of [`parse`] for pixels that are multiples of 1/255.
pub fn encode(batch: &Batch) -> Vec<u8> {
    let mut out = Vec::with_capacity(batch.len() * RECORD_BYTES);
    for (i, &label) in batch.labels.iter().enumerate() {
        out.push(label as u8);
        out.extend(batch.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES].iter().map(|&v| crate::thumbnail::to_byte(v)));
    }
    out
}

pub fn read_files(paths: &[PathBuf]) -> Result<Batch> {
    let mut all = Batch { labels: Vec::new(), pixels: Vec::new() };
    for path in paths {
        let bytes = std::fs::read(path).map_err(|e| AppError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        if bytes.is_empty() {
            tracing::warn!(path = %path.display(), "empty CIFAR-10 batch file");
        }
        let b = parse(&bytes)?;
        all.labels.extend(b.labels);
        all.pixels.extend(b.pixels);
    }
    Ok(all)
}

/// Builds a dataset from train (and optionally test) batch files. Without
/// test files, a stratified `test_fraction` of the train files is held out.
pub fn ingest(id: &str, train: &[PathBuf], test: &[PathBuf], test_fraction: f64, seed: u64) -> Result<Dataset> {
    let train_batch = read_files(train)?;
    let (train_set, test_set) = if test.is_empty() {
        let (tr, te) = stratified_split(&train_batch.labels, NUM_CLASSES, test_fraction, seed);
        let pick = |idx: &[usize]| Batch {
            labels: idx.iter().map(|&i| train_batch.labels[i]).collect(),
            pixels: idx.iter().flat_map(|&i| train_batch.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES].iter().copied()).collect(),
        };
        (pick(&tr).into_image_set()?, pick(&te).into_image_set()?)
    } else {
        (train_batch.into_image_set()?, read_files(test)?.into_image_set()?)
    };
    Ok(Dataset::new(id, NUM_CLASSES, train_set, test_set)?)
}

pub fn write_file(path: &Path, batch: &Batch) -> Result<()> {
    Ok(std::fs::write(path, encode(batch))?)
}
