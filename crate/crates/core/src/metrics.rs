use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub supervised: f64,
    pub unsupervised: f64,
    pub total: f64,
    pub included: usize,
    pub per_class_included: Vec<usize>,
    /// Loss normalizer Z used for this step.
    pub normalizer: f64,
}

/// Class-count snapshot: `c_n`, `ĉ_n` and the thresholds in force.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CountSnapshot {
    pub all: Vec<f64>,
    pub confident: Vec<f64>,
    pub thresholds: Vec<f64>,
}

/// One test-split evaluation. Accuracies are fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub running_max: f64,
    pub counts: CountSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceEvent {
    pub step: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub divergence: Option<DivergenceEvent>,
}

impl RunMetrics {
    pub fn best_accuracy(&self) -> Option<f64> {
        self.evals.iter().map(|e| e.accuracy).fold(None, |m, a| Some(m.map_or(a, |m: f64| m.max(a))))
    }

    pub fn last_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }

    /// Overall accuracy series.
    pub fn accuracies(&self) -> Vec<f64> {
        self.evals.iter().map(|e| e.accuracy).collect()
    }
}
