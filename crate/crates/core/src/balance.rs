//! Pseudo-label class balancing.
//!
//! Class counts of the model's own pseudo-labels stand in for the unknown
//! class distribution of the unlabeled pool. Four methods use them:
//!
//! | method | thresholds                      | loss weights          |
//! |--------|---------------------------------|-----------------------|
//! | 0      | τ for every class               | 1                     |
//! | 1      | τ − Δ(1 − c_n / max c)          | 1                     |
//! | 2      | τ                               | 1 / c_n, normalized   |
//! | 3      | τ                               | 1 / ĉ_n, normalized   |
//! | 4      | as method 1                     | as method 3           |
//!
//! `c_n` counts every pseudo-label of class `n`, `ĉ_n` only those that
//! passed their threshold. Weighted losses are divided by the mean weight of
//! the included rows so the loss keeps its unweighted magnitude.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::ssl::{unsupervised_loss, PseudoBatch};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
#[repr(u8)]
pub enum BalanceMethod {
    Off = 0,
    Threshold = 1,
    WeightAll = 2,
    WeightConfident = 3,
    Hybrid = 4,
}

impl BalanceMethod {
    pub const ALL: [BalanceMethod; 5] = [Self::Off, Self::Threshold, Self::WeightAll, Self::WeightConfident, Self::Hybrid];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn lowers_thresholds(self) -> bool {
        matches!(self, Self::Threshold | Self::Hybrid)
    }

    pub fn weights_loss(self) -> bool {
        matches!(self, Self::WeightAll | Self::WeightConfident | Self::Hybrid)
    }
}

impl TryFrom<u8> for BalanceMethod {
    type Error = crate::Error;

    fn try_from(id: u8) -> Result<Self> {
        Ok(match id {
            0 => Self::Off,
            1 => Self::Threshold,
            2 => Self::WeightAll,
            3 => Self::WeightConfident,
            4 => Self::Hybrid,
            _ => bail!(Config, "unknown balance method {id}"),
        })
    }
}

impl From<BalanceMethod> for u8 {
    fn from(m: BalanceMethod) -> u8 {
        m as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceConfig {
    pub method: BalanceMethod,
    /// Confidence threshold τ.
    pub tau: f64,
    /// Maximum threshold reduction Δ for minority classes.
    pub delta: f64,
    pub lambda_u: f64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self { method: BalanceMethod::Off, tau: 0.95, delta: 0.0, lambda_u: 1.0 }
    }
}

impl BalanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            bail!(Config, "tau must be in (0, 1), got {}", self.tau);
        }
        if !(self.delta >= 0.0 && self.delta < self.tau) {
            bail!(Config, "delta must satisfy 0 <= delta < tau, got {}", self.delta);
        }
        if !(self.lambda_u >= 0.0 && self.lambda_u.is_finite()) {
            bail!(Config, "lambda_u must be nonnegative, got {}", self.lambda_u);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CountMode {
    /// Counts are the histogram accumulated since the last [`ClassCounts::reset`].
    ExactEpoch,
    /// Exponential moving average of batch histograms rescaled to the pool
    /// size, with bias correction for the zero start.
    Ema { decay: f64 },
}

impl Default for CountMode {
    fn default() -> Self {
        CountMode::Ema { decay: 0.999 }
    }
}

/// Running pseudo-label counts `c_n` (all) and `ĉ_n` (confident only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    mode: CountMode,
    pool_size: usize,
    all: Vec<f64>,
    confident: Vec<f64>,
    /// Total EMA weight given to observations so far, `1 - decay^t`.
    ema_mass: f64,
    batches: u64,
}

impl ClassCounts {
    pub fn new(num_classes: usize, pool_size: usize, mode: CountMode) -> Result<Self> {
        if num_classes < 2 {
            bail!(Config, "need at least two classes");
        }
        if let CountMode::Ema { decay } = mode {
            if !(0.0..1.0).contains(&decay) {
                bail!(Config, "ema decay must be in [0, 1), got {decay}");
            }
        }
        Ok(Self {
            mode,
            pool_size,
            all: vec![0.0; num_classes],
            confident: vec![0.0; num_classes],
            ema_mass: 0.0,
            batches: 0,
        })
    }

    pub fn mode(&self) -> CountMode {
        self.mode
    }

    pub fn num_classes(&self) -> usize {
        self.all.len()
    }

    /// Number of batches observed since creation or the last reset.
    pub fn batches(&self) -> u64 {
        self.batches
    }

    pub fn has_data(&self) -> bool {
        self.all.iter().any(|&c| c > 0.0)
    }

    /// `c_n` (bias corrected in EMA mode).
    pub fn all(&self) -> Vec<f64> {
        self.corrected(&self.all)
    }

    /// `ĉ_n` (bias corrected in EMA mode).
    pub fn confident(&self) -> Vec<f64> {
        self.corrected(&self.confident)
    }

    /// Uncorrected EMA state (equal to [`ClassCounts::all`] in exact mode).
    pub fn raw_all(&self) -> &[f64] {
        &self.all
    }

    pub fn raw_confident(&self) -> &[f64] {
        &self.confident
    }

    fn corrected(&self, v: &[f64]) -> Vec<f64> {
        match self.mode {
            CountMode::Ema { .. } if self.ema_mass > 0.0 => v.iter().map(|c| c / self.ema_mass).collect(),
            _ => v.to_vec(),
        }
    }

    /// Folds a pseudo-labeled batch into the counts. Confident counts use the
    /// batch mask; an unthresholded batch contributes nothing to them.
    pub fn update(&mut self, pseudo: &PseudoBatch) -> Result<()> {
        if pseudo.is_empty() {
            return Ok(());
        }
        let n = self.num_classes();
        if pseudo.num_classes() != n {
            bail!(Dimension, "{} classes in batch, {} tracked", pseudo.num_classes(), n);
        }
        let mut hist = vec![0.0; n];
        let mut conf = vec![0.0; n];
        for (i, &l) in pseudo.labels.iter().enumerate() {
            hist[l] += 1.0;
            if pseudo.mask.get(i).copied().unwrap_or(false) {
                conf[l] += 1.0;
            }
        }
        match self.mode {
            CountMode::ExactEpoch => {
                for k in 0..n {
                    self.all[k] += hist[k];
                    self.confident[k] += conf[k];
                }
            }
            CountMode::Ema { decay } => {
                let scale = self.pool_size.max(pseudo.len()) as f64 / pseudo.len() as f64;
                for k in 0..n {
                    self.all[k] = decay * self.all[k] + (1.0 - decay) * hist[k] * scale;
                    self.confident[k] = decay * self.confident[k] + (1.0 - decay) * conf[k] * scale;
                }
                self.ema_mass = decay * self.ema_mass + (1.0 - decay);
            }
        }
        self.batches += 1;
        Ok(())
    }

    /// Starts a fresh epoch count.
    pub fn reset(&mut self) {
        self.all.fill(0.0);
        self.confident.fill(0.0);
        self.ema_mass = 0.0;
        self.batches = 0;
    }
}

/// `τ_n = τ − Δ·(1 − c_n / max c)`; all `τ` when no class has been counted.
pub fn class_thresholds(counts: &[f64], tau: f64, delta: f64) -> Vec<f64> {
    let max = counts.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return vec![tau; counts.len()];
    }
    counts.iter().map(|&c| tau - delta * (1.0 - c / max)).collect()
}

/// `w_n = 1 / max(k_n, 1)`.
pub fn class_weights(counts: &[f64]) -> Vec<f64> {
    counts.iter().map(|&k| 1.0 / k.max(1.0)).collect()
}

/// Mean weight over the included rows (1 when nothing is included).
pub fn normalizer(weights: &[f64], included_labels: impl IntoIterator<Item = usize>) -> f64 {
    let (sum, n) = included_labels.into_iter().fold((0.0, 0usize), |(s, n), l| (s + weights[l], n + 1));
    if n == 0 {
        1.0
    } else {
        sum / n as f64
    }
}

/// Thresholds and weights for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancePlan {
    pub method: BalanceMethod,
    pub thresholds: Vec<f64>,
    pub weights: Vec<f64>,
    /// Whether the loss is divided by the batch normalizer Z.
    pub normalized: bool,
}

impl BalancePlan {
    /// Plain consistency loss: threshold τ, unit weights, Z = 1.
    pub fn unbalanced(num_classes: usize, tau: f64) -> Self {
        Self {
            method: BalanceMethod::Off,
            thresholds: vec![tau; num_classes],
            weights: vec![1.0; num_classes],
            normalized: false,
        }
    }

    /// Z for a batch whose mask has been set with this plan's thresholds.
    pub fn normalizer(&self, pseudo: &PseudoBatch) -> f64 {
        if self.normalized {
            normalizer(&self.weights, pseudo.included_labels())
        } else {
            1.0
        }
    }

    /// Masks `pseudo` with the plan thresholds and evaluates the balanced
    /// unsupervised loss on the strong-view logits. Returns `(L_u, dL_u/dz, Z)`.
    pub fn unsupervised_loss(&self, strong_logits: &Tensor, pseudo: &mut PseudoBatch) -> Result<(f64, Tensor, f64)> {
        pseudo.apply_thresholds(&self.thresholds)?;
        let z = self.normalizer(pseudo);
        let (loss, grad) = unsupervised_loss(strong_logits, pseudo, &self.weights, z)?;
        Ok((loss, grad, z))
    }
}

pub fn balance_plan(config: &BalanceConfig, counts: &ClassCounts) -> Result<BalancePlan> {
    config.validate()?;
    let n = counts.num_classes();
    let mut plan = BalancePlan::unbalanced(n, config.tau);
    plan.method = config.method;
    if config.method.lowers_thresholds() {
        plan.thresholds = class_thresholds(&counts.all(), config.tau, config.delta);
    }
    match config.method {
        BalanceMethod::WeightAll => {
            plan.weights = class_weights(&counts.all());
            plan.normalized = true;
        }
        BalanceMethod::WeightConfident | BalanceMethod::Hybrid => {
            plan.weights = class_weights(&counts.confident());
            plan.normalized = true;
        }
        BalanceMethod::Off | BalanceMethod::Threshold => {}
    }
    Ok(plan)
}
