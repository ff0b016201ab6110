//! Post-run classification of poor training curves.
//!
//! Two failure modes call for opposite remedies. An *instability* is a
//! sudden collapse of test accuracy (or outright divergence); it is treated
//! by balancing less aggressively and stepping more gently. A *local
//! minimum* is a curve that stalls early with at least one class left far
//! behind; it is treated by balancing harder, stepping harder, and
//! replacing the prototypes of the lagging classes.
//!
//! Accuracies are fractions; thresholds here are in percentage points.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::metrics::{EvalRecord, RunMetrics};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisThresholds {
    /// An instability is a fall of more than this from the running max.
    pub drop_points: f64,
    /// Evaluations within this band of the final running max count as plateau.
    pub plateau_band_points: f64,
    /// A local minimum needs a trailing plateau longer than this fraction of
    /// all evaluations.
    pub plateau_fraction: f64,
    /// A class trailing overall accuracy by more than this is weak.
    pub weak_gap_points: f64,
    pub min_evals: usize,
}

impl Default for DiagnosisThresholds {
    fn default() -> Self {
        Self { drop_points: 15.0, plateau_band_points: 2.0, plateau_fraction: 0.3, weak_gap_points: 20.0, min_evals: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Healthy,
    Instability,
    LocalMinimum,
    Undetermined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperParameter {
    /// Threshold reduction Δ (methods 1 and 4).
    Delta,
    /// Unlabeled loss weight λ_u (methods 2 and 3).
    LambdaU,
    WeightDecay,
    LearningRate,
    /// Confidence threshold τ.
    Tau,
    /// Prototype of the given class.
    Prototype(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Increase,
    Decrease,
    Replace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suggestion {
    pub target: HyperParameter,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Evidence {
    /// Largest fall below the running max, in points.
    pub max_drop: f64,
    /// Trailing evaluations within the plateau band.
    pub plateau_length: usize,
    /// Classes trailing overall accuracy by more than the weak gap, final eval.
    pub weak_classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub verdict: Verdict,
    pub evidence: Evidence,
    pub suggestions: Vec<Suggestion>,
}

fn tuning(direction: Direction) -> Vec<Suggestion> {
    use Direction::*;
    use HyperParameter::*;
    let opposite = if direction == Increase { Decrease } else { Increase };
    [(Delta, direction), (LambdaU, direction), (WeightDecay, direction), (LearningRate, direction), (Tau, opposite)]
        .into_iter()
        .map(|(target, direction)| Suggestion { target, direction })
        .collect()
}

pub fn weak_classes(eval: &EvalRecord, gap_points: f64) -> Vec<usize> {
    eval.per_class
        .iter()
        .enumerate()
        .filter(|(_, &a)| (eval.accuracy - a) * 100.0 > gap_points)
        .map(|(c, _)| c)
        .collect()
}

pub fn diagnose(metrics: &RunMetrics) -> Diagnosis {
    diagnose_with(metrics, &DiagnosisThresholds::default())
}

pub fn diagnose_with(metrics: &RunMetrics, t: &DiagnosisThresholds) -> Diagnosis {
    let acc: Vec<f64> = metrics.evals.iter().map(|e| e.accuracy * 100.0).collect();
    let mut evidence = Evidence::default();
    let mut running = f64::NEG_INFINITY;
    for &a in &acc {
        running = running.max(a);
        evidence.max_drop = evidence.max_drop.max(running - a);
    }
    if let Some(last) = metrics.evals.last() {
        evidence.weak_classes = weak_classes(last, t.weak_gap_points);
        evidence.plateau_length = acc.iter().rev().take_while(|&&a| a >= running - t.plateau_band_points).count();
    }
    let verdict = if metrics.divergence.is_some() || (acc.len() >= t.min_evals && evidence.max_drop > t.drop_points) {
        Verdict::Instability
    } else if acc.len() < t.min_evals {
        Verdict::Undetermined
    } else if evidence.plateau_length as f64 > t.plateau_fraction * acc.len() as f64 && !evidence.weak_classes.is_empty() {
        Verdict::LocalMinimum
    } else {
        Verdict::Healthy
    };
    let suggestions = match verdict {
        Verdict::Instability => tuning(Direction::Decrease),
        Verdict::LocalMinimum => {
            let mut s = tuning(Direction::Increase);
            s.extend(
                evidence
                    .weak_classes
                    .iter()
                    .map(|&c| Suggestion { target: HyperParameter::Prototype(c), direction: Direction::Replace }),
            );
            s
        }
        Verdict::Healthy | Verdict::Undetermined => Vec::new(),
    };
    Diagnosis { verdict, evidence, suggestions }
}
