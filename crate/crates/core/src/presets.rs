//! Named hyper-parameter presets.
//!
//! Seven published configurations: a FixMatch baseline, training and
//! self-training settings for Cifar-10 and for SVHN. Rows that serve two
//! balance methods are exposed under one name per method, e.g.
//! `cifar-balance1` and `cifar-balance4` share a row.

use serde::{Deserialize, Serialize};

use crate::balance::{BalanceConfig, BalanceMethod};
use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PresetRow {
    pub label: &'static str,
    pub methods: &'static [BalanceMethod],
    pub weight_decay: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub unlabeled_ratio: usize,
    pub tau: f64,
    pub delta: f64,
}

use BalanceMethod::*;

pub const ROWS: [PresetRow; 7] = [
    PresetRow {
        label: "fixmatch",
        methods: &[Off],
        weight_decay: 5e-4,
        lr: 0.03,
        batch_size: 64,
        momentum: 0.88,
        unlabeled_ratio: 7,
        tau: 0.95,
        delta: 0.0,
    },
    PresetRow {
        label: "cifar",
        methods: &[Threshold, Hybrid],
        weight_decay: 8e-4,
        lr: 0.06,
        batch_size: 30,
        momentum: 0.88,
        unlabeled_ratio: 9,
        tau: 0.95,
        delta: 0.25,
    },
    PresetRow {
        label: "cifar",
        methods: &[WeightAll, WeightConfident],
        weight_decay: 8e-4,
        lr: 0.06,
        batch_size: 30,
        momentum: 0.88,
        unlabeled_ratio: 9,
        tau: 0.9,
        delta: 0.0,
    },
    PresetRow {
        label: "cifar-selftrain",
        methods: &[Hybrid],
        weight_decay: 5e-4,
        lr: 0.03,
        batch_size: 64,
        momentum: 0.88,
        unlabeled_ratio: 7,
        tau: 0.95,
        delta: 0.25,
    },
    PresetRow {
        label: "svhn",
        methods: &[Threshold, Hybrid],
        weight_decay: 6e-4,
        lr: 0.04,
        batch_size: 32,
        momentum: 0.85,
        unlabeled_ratio: 7,
        tau: 0.95,
        delta: 0.25,
    },
    PresetRow {
        label: "svhn",
        methods: &[WeightAll, WeightConfident],
        weight_decay: 6e-4,
        lr: 0.04,
        batch_size: 32,
        momentum: 0.85,
        unlabeled_ratio: 7,
        tau: 0.9,
        delta: 0.0,
    },
    PresetRow {
        label: "svhn-selftrain",
        methods: &[Off],
        weight_decay: 6e-4,
        lr: 0.04,
        batch_size: 32,
        momentum: 0.85,
        unlabeled_ratio: 7,
        tau: 0.95,
        delta: 0.25,
    },
];

/// Hyper-parameters resolved from a preset name.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub balance: BalanceConfig,
    pub weight_decay: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub unlabeled_ratio: usize,
}

impl PresetRow {
    fn resolve(&self, method: BalanceMethod) -> Preset {
        Preset {
            balance: BalanceConfig { method, tau: self.tau, delta: self.delta, lambda_u: 1.0 },
            weight_decay: self.weight_decay,
            lr: self.lr,
            batch_size: self.batch_size,
            momentum: self.momentum,
            unlabeled_ratio: self.unlabeled_ratio,
        }
    }

    fn names(&self) -> impl Iterator<Item = (alloc::string::String, BalanceMethod)> + '_ {
        let single = self.methods.len() == 1 && self.label != "cifar" && self.label != "svhn";
        self.methods.iter().map(move |&m| {
            let name = if single { self.label.into() } else { alloc::format!("{}-balance{}", self.label, m.id()) };
            (name, m)
        })
    }
}

/// Every preset name, in table order.
pub fn names() -> alloc::vec::Vec<alloc::string::String> {
    ROWS.iter().flat_map(|r| r.names().map(|(n, _)| n)).collect()
}

pub fn preset(name: &str) -> Result<Preset> {
    for row in &ROWS {
        for (n, m) in row.names() {
            if n == name {
                return Ok(row.resolve(m));
            }
        }
    }
    bail!(Config, "unknown preset {name}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_name_resolves() {
        let names = names();
        assert_eq!(names.len(), 11);
        for n in &names {
            preset(n).unwrap();
        }
        assert!(preset("imagenet").is_err());
    }

    #[test]
    fn cifar_selftrain_row() {
        let p = preset("cifar-selftrain").unwrap();
        assert_eq!(
            (p.weight_decay, p.lr, p.batch_size, p.momentum, p.unlabeled_ratio, p.balance.tau, p.balance.delta),
            (5e-4, 0.03, 64, 0.88, 7, 0.95, 0.25)
        );
        assert_eq!(p.balance.method, Hybrid);
    }
}
