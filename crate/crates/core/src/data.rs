//! Datasets, true-label bookkeeping and prototype sets.
//!
//! True labels sit behind [`TrueLabels`], which counts every read by
//! purpose. The training path only ever sees the class assignment of a
//! [`PrototypeSet`]; the counters let tests prove it.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Why a true label was read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelUse {
    /// Simulating the human who picks prototypes.
    Prototype,
    /// Test-split accuracy.
    Evaluation,
    /// Reporting only: purity audits, dump files, mislabel warnings.
    Audit,
}

#[derive(Debug, Default)]
struct Counters {
    prototype: AtomicUsize,
    evaluation: AtomicUsize,
    audit: AtomicUsize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelReads {
    pub prototype: usize,
    pub evaluation: usize,
    pub audit: usize,
}

/// Class ids with read accounting. Clones share the counters.
#[derive(Debug, Clone)]
pub struct TrueLabels {
    labels: Vec<u16>,
    reads: Arc<Counters>,
}

impl TrueLabels {
    pub fn new(labels: Vec<u16>) -> Self {
        Self { labels, reads: Arc::new(Counters::default()) }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, i: usize, purpose: LabelUse) -> usize {
        let c = match purpose {
            LabelUse::Prototype => &self.reads.prototype,
            LabelUse::Evaluation => &self.reads.evaluation,
            LabelUse::Audit => &self.reads.audit,
        };
        c.fetch_add(1, Ordering::Relaxed);
        self.labels[i] as usize
    }

    pub fn reads(&self) -> LabelReads {
        LabelReads {
            prototype: self.reads.prototype.load(Ordering::Relaxed),
            evaluation: self.reads.evaluation.load(Ordering::Relaxed),
            audit: self.reads.audit.load(Ordering::Relaxed),
        }
    }
}

/// Images `[M, C, H, W]` with their true labels.
#[derive(Debug, Clone)]
pub struct ImageSet {
    images: Tensor,
    labels: TrueLabels,
}

impl ImageSet {
    pub fn new(images: Tensor, labels: Vec<u16>) -> Result<Self> {
        if images.rank() != 4 {
            bail!(Dimension, "images must be [M, C, H, W], got {:?}", images.shape());
        }
        if images.rows() != labels.len() {
            bail!(Dimension, "{} images but {} labels", images.rows(), labels.len());
        }
        Ok(Self { images, labels: TrueLabels::new(labels) })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &TrueLabels {
        &self.labels
    }

    /// `[C, H, W]` of every image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> Tensor {
        let [c, h, w] = self.image_shape();
        Tensor::new(vec![c, h, w], self.images.row(i).to_vec()).expect("row has image size")
    }

    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        self.images.gather_rows(indices)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub id: String,
    pub num_classes: usize,
    /// The unlabeled pool (its true labels are audit-only).
    pub train: ImageSet,
    pub test: ImageSet,
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
}

impl Dataset {
    /// Builds a dataset and computes per-channel statistics over the train
    /// split.
    pub fn new(id: impl Into<String>, num_classes: usize, train: ImageSet, test: ImageSet) -> Result<Self> {
        if num_classes < 2 {
            bail!(Config, "need at least two classes");
        }
        if !train.is_empty() && !test.is_empty() && train.image_shape() != test.image_shape() {
            bail!(Dimension, "train and test image shapes differ");
        }
        for set in [&train, &test] {
            if let Some(&bad) = set.labels.labels.iter().find(|&&l| l as usize >= num_classes) {
                bail!(Data, "label {} out of range for {} classes", bad, num_classes);
            }
        }
        let (channel_mean, channel_std) = channel_stats(&train.images);
        Ok(Self { id: id.into(), num_classes, train, test, channel_mean, channel_std })
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.train.image_shape()
    }

    /// Class histogram over both splits (audit read).
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for set in [&self.train, &self.test] {
            for i in 0..set.len() {
                h[set.labels.get(i, LabelUse::Audit)] += 1;
            }
        }
        h
    }
}

fn channel_stats(images: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = images.shape();
    let (m, c, plane) = (s[0], s[1], s[2] * s[3]);
    let mut mean = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for i in 0..m {
        let row = images.row(i);
        for ch in 0..c {
            for &v in &row[ch * plane..(ch + 1) * plane] {
                mean[ch] += v;
                sq[ch] += v * v;
            }
        }
    }
    let n = (m * plane).max(1) as f64;
    let std = mean.iter().zip(&sq).map(|(&s1, &s2)| libm::sqrt((s2 / n - (s1 / n) * (s1 / n)).max(0.0))).collect();
    (mean.iter().map(|s| s / n).collect(), std)
}

/// Splits `0..labels.len()` into train/test index lists, stratified by
/// class: each class contributes `round(count * test_fraction)` samples to
/// test. Both lists are sorted.
pub fn stratified_split(labels: &[u16], num_classes: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, mut members) in by_class.into_iter().enumerate() {
        let mut r = rng::keyed(seed, &[rng::stream::SPLIT, c as u64]);
        members.shuffle(&mut r);
        let k = libm::round(members.len() as f64 * test_fraction) as usize;
        test.extend_from_slice(&members[..k]);
        train.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Manual,
    Replaced,
    SelfTrainAugmented,
}

/// Labeled examples of a run: for each class, indices into the train pool.
/// The first index of each class is its prototype. Sets are immutable;
/// refinements create new versions pointing at their parent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub id: u32,
    pub parent: Option<u32>,
    pub dataset_id: String,
    pub classes: Vec<Vec<usize>>,
    pub provenance: Provenance,
}

/// Emitted when an audit finds a prototype whose true label disagrees with
/// its assigned class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MislabelWarning {
    pub index: usize,
    pub assigned: usize,
    pub actual: usize,
}

impl PrototypeSet {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(index, class)` pairs in class order.
    pub fn labeled(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.classes.iter().enumerate().flat_map(|(c, idx)| idx.iter().map(move |&i| (i, c)))
    }

    pub fn contains(&self, index: usize) -> bool {
        self.classes.iter().any(|c| c.contains(&index))
    }

    pub fn validate(&self, num_classes: usize, pool_size: usize) -> Result<()> {
        if self.classes.len() != num_classes {
            bail!(Validation, "set covers {} classes, dataset has {}", self.classes.len(), num_classes);
        }
        let mut seen = BTreeSet::new();
        for (c, members) in self.classes.iter().enumerate() {
            if members.is_empty() {
                bail!(Validation, "class {c} has no labeled example");
            }
            for &i in members {
                if i >= pool_size {
                    bail!(Validation, "index {} out of range for pool of {}", i, pool_size);
                }
                if !seen.insert(i) {
                    bail!(Validation, "index {i} used more than once");
                }
            }
        }
        Ok(())
    }

    /// One (or more) indices per class, given as `(index, class)` pairs.
    pub fn from_assignments(id: u32, dataset: &Dataset, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut classes = vec![Vec::new(); dataset.num_classes];
        for &(i, c) in pairs {
            if c >= dataset.num_classes {
                bail!(Validation, "class {} out of range for {} classes", c, dataset.num_classes);
            }
            classes[c].push(i);
        }
        Self::from_classes(id, dataset, classes)
    }

    pub fn from_classes(id: u32, dataset: &Dataset, classes: Vec<Vec<usize>>) -> Result<Self> {
        let set = Self { id, parent: None, dataset_id: dataset.id.clone(), classes, provenance: Provenance::Manual };
        set.validate(dataset.num_classes, dataset.train.len())?;
        Ok(set)
    }

    /// Compares every labeled index with its true label (audit reads).
    pub fn audit(&self, dataset: &Dataset) -> Vec<MislabelWarning> {
        self.labeled()
            .filter_map(|(index, assigned)| {
                let actual = dataset.train.labels().get(index, LabelUse::Audit);
                (actual != assigned).then_some(MislabelWarning { index, assigned, actual })
            })
            .collect()
    }

    /// New version with `class`'s prototype (its first index) replaced.
    pub fn replace_prototype(&self, new_id: u32, class: usize, new_index: usize, pool_size: usize) -> Result<Self> {
        let Some(members) = self.classes.get(class) else {
            bail!(Validation, "class {} out of range for {} classes", class, self.classes.len());
        };
        if members.first() == Some(&new_index) {
            bail!(Validation, "index {new_index} is already the prototype of class {class}");
        }
        if self.contains(new_index) {
            bail!(Validation, "index {new_index} is already labeled in this set");
        }
        if new_index >= pool_size {
            bail!(Validation, "index {} out of range for pool of {}", new_index, pool_size);
        }
        let mut classes = self.classes.clone();
        classes[class][0] = new_index;
        Ok(Self {
            id: new_id,
            parent: Some(self.id),
            dataset_id: self.dataset_id.clone(),
            classes,
            provenance: Provenance::Replaced,
        })
    }
}

/// Append-only store of prototype-set versions.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PrototypeRegistry {
    sets: Vec<PrototypeSet>,
}

impl PrototypeRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_id(&self) -> u32 {
        self.sets.iter().map(|s| s.id + 1).max().unwrap_or(1)
    }

    pub fn get(&self, id: u32) -> Option<&PrototypeSet> {
        self.sets.iter().find(|s| s.id == id)
    }

    pub fn sets(&self) -> &[PrototypeSet] {
        &self.sets
    }

    pub fn insert(&mut self, set: PrototypeSet) -> Result<u32> {
        if self.get(set.id).is_some() {
            bail!(Validation, "prototype set {} already exists", set.id);
        }
        let id = set.id;
        self.sets.push(set);
        Ok(id)
    }

    pub fn create(&mut self, dataset: &Dataset, classes: Vec<Vec<usize>>) -> Result<u32> {
        let set = PrototypeSet::from_classes(self.next_id(), dataset, classes)?;
        self.insert(set)
    }

    pub fn replace(&mut self, id: u32, class: usize, new_index: usize, pool_size: usize) -> Result<u32> {
        let Some(old) = self.get(id) else {
            bail!(Validation, "unknown prototype set {id}");
        };
        let new = old.replace_prototype(self.next_id(), class, new_index, pool_size)?;
        self.insert(new)
    }

    /// Ids from `id` back to its root.
    pub fn lineage(&self, id: u32) -> Vec<u32> {
        let mut out = Vec::new();
        let mut cur = self.get(id);
        while let Some(s) = cur {
            out.push(s.id);
            cur = s.parent.and_then(|p| self.get(p));
        }
        out
    }
}

/// Stands in for the human labeler on datasets with known truth: picks `k`
/// random train indices per class (prototype reads).
pub fn pick_by_truth(dataset: &Dataset, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for i in 0..dataset.train.len() {
        by_class[dataset.train.labels().get(i, LabelUse::Prototype)].push(i);
    }
    let mut r = rng::keyed(seed, &[rng::stream::SPLIT, 0xfeed]);
    by_class
        .into_iter()
        .enumerate()
        .map(|(c, mut members)| {
            if members.len() < k {
                return Err(crate::Error::Data(format!("class {c} has only {} samples", members.len())));
            }
            members.shuffle(&mut r);
            members.truncate(k);
            Ok(members)
        })
        .collect()
}

/// Stands in for a labeler choosing typical images: for each class, one of
/// the `candidates` train samples closest (Euclidean, pixel space) to the
/// class mean, chosen by `seed` (prototype reads).
pub fn pick_central(dataset: &Dataset, candidates: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if candidates == 0 {
        bail!(Config, "need at least one candidate per class");
    }
    let train = &dataset.train;
    let dim = train.images().row_len();
    let n = dataset.num_classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..train.len() {
        by_class[train.labels().get(i, LabelUse::Prototype)].push(i);
    }
    let mut r = rng::keyed(seed, &[rng::stream::SPLIT, 0xce47]);
    by_class
        .into_iter()
        .enumerate()
        .map(|(c, members)| {
            if members.is_empty() {
                bail!(Data, "class {c} has no samples");
            }
            let mut mean = vec![0.0; dim];
            for &i in &members {
                for (m, v) in mean.iter_mut().zip(train.images().row(i)) {
                    *m += v / members.len() as f64;
                }
            }
            let mut ranked: Vec<(f64, usize)> = members
                .iter()
                .map(|&i| (train.images().row(i).iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum(), i))
                .collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let pick = r.random_range(0..candidates.min(ranked.len()));
            Ok(vec![ranked[pick].1])
        })
        .collect()
}
