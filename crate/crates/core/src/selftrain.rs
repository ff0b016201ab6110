//! Self-training: promote the most confident pseudo-labels of a finished
//! run to labels and retrain with the enlarged labeled set.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{LabelUse, PrototypeSet, Provenance, TrueLabels};
use crate::error::{bail, Result};

/// One unlabeled sample's weak-view prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    /// Position in the unlabeled pool.
    pub index: usize,
    pub label: usize,
    pub confidence: f64,
    /// Audit copy of the true label, when known.
    pub true_label: Option<usize>,
}

/// Dump order: confidence descending, pool index ascending on ties.
pub fn dump_order(a: &PseudoLabelRecord, b: &PseudoLabelRecord) -> Ordering {
    b.confidence.total_cmp(&a.confidence).then(a.index.cmp(&b.index))
}

pub fn sort_records(records: &mut [PseudoLabelRecord]) {
    records.sort_by(dump_order);
}

pub fn is_sorted(records: &[PseudoLabelRecord]) -> bool {
    records.windows(2).all(|w| dump_order(&w[0], &w[1]) != Ordering::Greater)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Promotion {
    pub index: usize,
    pub label: usize,
    pub confidence: f64,
}

/// A class that had fewer than `k` candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub class: usize,
    pub available: usize,
    pub requested: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Selection {
    pub k_per_class: usize,
    /// Promotions grouped by class, each group in dump order.
    pub per_class: Vec<Vec<Promotion>>,
    pub shortfalls: Vec<Shortfall>,
}

impl Selection {
    pub fn promotions(&self) -> impl Iterator<Item = &Promotion> {
        self.per_class.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.per_class.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// For each class, the first `k` records of the sorted dump carrying that
/// pseudo-label, skipping samples that are already labeled.
pub fn select_top_k(records: &[PseudoLabelRecord], k: usize, labeled: &PrototypeSet) -> Result<Selection> {
    if records.is_empty() {
        bail!(Data, "empty pseudo-label dump");
    }
    if k == 0 {
        bail!(Config, "k must be at least 1");
    }
    if !is_sorted(records) {
        bail!(Data, "pseudo-label dump is not in confidence order");
    }
    let n = labeled.num_classes();
    let mut per_class: Vec<Vec<Promotion>> = vec![Vec::new(); n];
    for r in records {
        if r.label >= n {
            bail!(Data, "pseudo-label {} out of range for {} classes", r.label, n);
        }
        if per_class[r.label].len() < k && !labeled.contains(r.index) {
            per_class[r.label].push(Promotion { index: r.index, label: r.label, confidence: r.confidence });
        }
    }
    let shortfalls = per_class
        .iter()
        .enumerate()
        .filter(|(_, p)| p.len() < k)
        .map(|(class, p)| Shortfall { class, available: p.len(), requested: k })
        .collect();
    Ok(Selection { k_per_class: k, per_class, shortfalls })
}

/// Appends the promotions to `base` under their pseudo-labels. True labels
/// are not consulted.
pub fn assemble_labeled_set(base: &PrototypeSet, selection: &Selection, new_id: u32) -> Result<PrototypeSet> {
    if selection.per_class.len() > base.num_classes() {
        bail!(Validation, "selection has more classes than the labeled set");
    }
    let mut classes = base.classes.clone();
    for p in selection.promotions() {
        if classes.iter().any(|c| c.contains(&p.index)) {
            bail!(Validation, "promoted index {} is already labeled", p.index);
        }
        classes[p.label].push(p.index);
    }
    Ok(PrototypeSet {
        id: new_id,
        parent: Some(base.id),
        dataset_id: base.dataset_id.clone(),
        classes,
        provenance: Provenance::SelfTrainAugmented,
    })
}

/// Fraction of promotions whose pseudo-label equals the true label (audit
/// reads). `None` for an empty selection.
pub fn purity(selection: &Selection, truth: &TrueLabels) -> Option<f64> {
    let total = selection.len();
    if total == 0 {
        return None;
    }
    let correct = selection.promotions().filter(|p| truth.get(p.index, LabelUse::Audit) == p.label).count();
    Some(correct as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainPlan {
    pub source_run: String,
    pub k_per_class: usize,
    pub labeled_set: PrototypeSet,
    pub selection: Selection,
    /// Reporting only; nothing is gated on it.
    pub purity: Option<f64>,
}

impl SelfTrainPlan {
    pub fn summary(&self) -> String {
        format!(
            "{} labeled examples ({} promoted, {} short classes) from run {}",
            self.labeled_set.len(),
            self.selection.len(),
            self.selection.shortfalls.len(),
            self.source_run
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(index: usize, label: usize, confidence: f64) -> PseudoLabelRecord {
        PseudoLabelRecord { index, label, confidence, true_label: None }
    }

    fn protos(classes: Vec<Vec<usize>>) -> PrototypeSet {
        PrototypeSet { id: 1, parent: None, dataset_id: "d".into(), classes, provenance: Provenance::Manual }
    }

    #[test]
    fn sort_order() {
        let mut r = vec![rec(0, 0, 0.5), rec(1, 0, 0.9), rec(2, 0, 0.7), rec(3, 1, 0.9)];
        sort_records(&mut r);
        let order: Vec<usize> = r.iter().map(|x| x.index).collect();
        assert_eq!(order, vec![1, 3, 2, 0]);
        assert!(is_sorted(&r));
    }

    #[test]
    fn one_record_per_class() {
        let r = vec![rec(5, 1, 0.9), rec(6, 0, 0.8)];
        let s = select_top_k(&r, 1, &protos(vec![vec![0], vec![1]])).unwrap();
        assert_eq!(s.per_class[0][0].index, 6);
        assert_eq!(s.per_class[1][0].index, 5);
        assert!(s.shortfalls.is_empty());
    }

    #[test]
    fn order_preserving_filter_and_prototype_skip() {
        // class 0 at sorted positions 1, 4, 9; index 20 is a prototype
        let mut r = Vec::new();
        for pos in 0..10 {
            let label = if [1, 4, 9].contains(&pos) { 0 } else { 1 };
            r.push(rec(100 + pos, label, 1.0 - pos as f64 * 0.01));
        }
        r.insert(0, rec(20, 0, 1.0));
        let s = select_top_k(&r, 2, &protos(vec![vec![20], vec![21]])).unwrap();
        let got: Vec<usize> = s.per_class[0].iter().map(|p| p.index).collect();
        assert_eq!(got, vec![101, 104]);
    }

    #[test]
    fn shortfall_is_recorded() {
        let r = vec![rec(5, 1, 0.9), rec(6, 1, 0.8), rec(7, 0, 0.7)];
        let s = select_top_k(&r, 2, &protos(vec![vec![0], vec![1]])).unwrap();
        assert_eq!(s.shortfalls, vec![Shortfall { class: 0, available: 1, requested: 2 }]);
    }

    #[test]
    fn errors() {
        assert!(select_top_k(&[], 1, &protos(vec![vec![0], vec![1]])).is_err());
        let unsorted = vec![rec(1, 0, 0.1), rec(2, 0, 0.9)];
        assert!(select_top_k(&unsorted, 1, &protos(vec![vec![0], vec![1]])).is_err());
    }

    #[test]
    fn assembly_adds_k_per_class() {
        let base = protos((0..10).map(|c| vec![c]).collect());
        let records: Vec<_> = (0..200).map(|i| rec(10 + i, i % 10, 1.0 - i as f64 * 1e-3)).collect();
        let s = select_top_k(&records, 5, &base).unwrap();
        let set = assemble_labeled_set(&base, &s, 2).unwrap();
        assert_eq!(set.len(), 60);
        assert_eq!(set.provenance, Provenance::SelfTrainAugmented);
        assert_eq!(set.parent, Some(1));
        set.validate(10, 1000).unwrap();
        let empty = Selection { k_per_class: 0, per_class: vec![Vec::new(); 10], shortfalls: vec![] };
        assert_eq!(assemble_labeled_set(&base, &empty, 3).unwrap().classes, base.classes);
    }
}
