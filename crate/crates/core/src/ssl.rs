//! Consistency-training losses.
//!
//! All functions take logits (as `f64`) and return the loss together with
//! its gradient with respect to those logits. Cross-entropy is evaluated as
//! `logsumexp(z) - z_y`, so no probability is ever taken the log of.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::tensor::Tensor;

/// Labeled batch: weak views and their class ids.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub samples: Tensor,
    pub labels: Vec<usize>,
}

/// Unlabeled batch and the pool positions it was drawn from.
#[derive(Debug, Clone)]
pub struct UnlabeledBatch {
    pub samples: Tensor,
    pub source_indices: Vec<usize>,
}

/// Weak-view predictions for an unlabeled batch. The probabilities are
/// plain numbers: nothing downstream differentiates through them.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoBatch {
    num_classes: usize,
    probs: Vec<f64>,
    pub labels: Vec<usize>,
    pub confidences: Vec<f64>,
    /// Rows that pass their class threshold. Empty until thresholds are applied.
    pub mask: Vec<bool>,
}

impl PseudoBatch {
    pub fn from_probs(probs: &Tensor) -> Result<Self> {
        let [rows, n] = *probs.shape() else {
            bail!(Dimension, "expected [rows, classes], got {:?}", probs.shape());
        };
        let mut labels = Vec::with_capacity(rows);
        let mut confidences = Vec::with_capacity(rows);
        for r in 0..rows {
            let (label, conf) = argmax(probs.row(r));
            labels.push(label);
            confidences.push(conf);
        }
        Ok(Self { num_classes: n, probs: probs.data().to_vec(), labels, confidences, mask: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn probs(&self, row: usize) -> &[f64] {
        &self.probs[row * self.num_classes..][..self.num_classes]
    }

    /// Sets `mask[b] = confidence[b] >= thresholds[label[b]]`.
    pub fn apply_thresholds(&mut self, thresholds: &[f64]) -> Result<()> {
        if thresholds.len() != self.num_classes {
            bail!(Config, "{} thresholds for {} classes", thresholds.len(), self.num_classes);
        }
        self.mask = self.labels.iter().zip(&self.confidences).map(|(&l, &c)| c >= thresholds[l]).collect();
        Ok(())
    }

    pub fn included(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn included_per_class(&self) -> Vec<usize> {
        let mut out = vec![0; self.num_classes];
        for (&l, &m) in self.labels.iter().zip(&self.mask) {
            if m {
                out[l] += 1;
            }
        }
        out
    }

    /// Pseudo-labels of the included rows, in row order.
    pub fn included_labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().zip(&self.mask).filter(|(_, &m)| m).map(|(&l, _)| l)
    }
}

/// Per-step loss summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub supervised: f64,
    pub unsupervised: f64,
    pub total: f64,
    pub lambda_u: f64,
    pub included: usize,
    pub per_class_included: Vec<usize>,
}

fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    (best, row[best])
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|&z| libm::exp(z - m)).sum();
    m + libm::log(s)
}

/// `H(onehot(label), softmax(logits))`.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    log_sum_exp(logits) - logits[label]
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&z| libm::exp(z - lse)).collect()
}

pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let [rows, n] = *logits.shape() else {
        bail!(Dimension, "expected [rows, classes], got {:?}", logits.shape());
    };
    let mut data = Vec::with_capacity(rows * n);
    for r in 0..rows {
        data.extend(softmax(logits.row(r)));
    }
    Tensor::new(vec![rows, n], data)
}

fn check_logits(logits: &Tensor, rows: usize) -> Result<usize> {
    match *logits.shape() {
        [r, n] if r == rows && n > 0 => Ok(n),
        ref s => bail!(Dimension, "expected [{}, N] logits, got {:?}", rows, s),
    }
}

/// Mean cross-entropy over a labeled batch and its logit gradient
/// `(softmax - onehot) / B`.
pub fn supervised_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if labels.is_empty() {
        bail!(Data, "empty labeled batch");
    }
    let n = check_logits(logits, labels.len())?;
    let b = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(&[labels.len(), n]);
    for (r, &y) in labels.iter().enumerate() {
        if y >= n {
            bail!(Data, "label {} out of range for {} classes", y, n);
        }
        let z = logits.row(r);
        loss += cross_entropy(z, y);
        let g = grad.row_mut(r);
        for (gv, p) in g.iter_mut().zip(softmax(z)) {
            *gv = p / b;
        }
        g[y] -= 1.0 / b;
    }
    let loss = loss / b;
    if !loss.is_finite() {
        return Err(Error::NumericDivergence("supervised loss".into()));
    }
    Ok((loss, grad))
}

/// Pseudo-labels from weak-view logits (mask left empty).
pub fn pseudo_label(weak_logits: &Tensor) -> Result<PseudoBatch> {
    PseudoBatch::from_probs(&softmax_rows(weak_logits)?)
}

/// `L_u = 1/(Z·μ) · Σ_b mask_b · w[q̂_b] · H(q̂_b, softmax(strong_b))`.
///
/// `pseudo.mask` must already be set. Masked-out rows get a zero gradient.
pub fn unsupervised_loss(strong_logits: &Tensor, pseudo: &PseudoBatch, weights: &[f64], z: f64) -> Result<(f64, Tensor)> {
    let mu = pseudo.len();
    if mu == 0 {
        bail!(Data, "empty unlabeled batch");
    }
    let n = check_logits(strong_logits, mu)?;
    if n != pseudo.num_classes || weights.len() != n {
        bail!(Dimension, "{} classes in logits, {} in pseudo-labels, {} weights", n, pseudo.num_classes, weights.len());
    }
    if pseudo.mask.len() != mu {
        return Err(Error::Usage("thresholds must be applied before the unsupervised loss"));
    }
    if !(z > 0.0) {
        bail!(Config, "normalizer must be positive, got {z}");
    }
    let scale = z * mu as f64;
    let mut sum = 0.0;
    let mut grad = Tensor::zeros(&[mu, n]);
    for r in 0..mu {
        if !pseudo.mask[r] {
            continue;
        }
        let y = pseudo.labels[r];
        let w = weights[y];
        let zr = strong_logits.row(r);
        sum += w * cross_entropy(zr, y);
        let g = grad.row_mut(r);
        let coef = w / scale;
        for (gv, p) in g.iter_mut().zip(softmax(zr)) {
            *gv = coef * p;
        }
        g[y] -= coef;
    }
    let loss = sum / scale;
    if !loss.is_finite() {
        return Err(Error::NumericDivergence("unsupervised loss".into()));
    }
    Ok((loss, grad))
}

pub fn total_loss(supervised: f64, unsupervised: f64, lambda_u: f64) -> f64 {
    supervised + lambda_u * unsupervised
}
