//! Balance-plan losses against term-by-term oracles, plus the threshold and
//! inclusion invariants.

use boss_core::balance::{
    balance_plan, class_thresholds, BalanceConfig, BalanceMethod, BalancePlan, ClassCounts, CountMode,
};
use boss_core::ssl::{pseudo_label, PseudoBatch};
use boss_core::Tensor;
use proptest::prelude::*;

/// Softmax then `-ln p[y]`, written out without the library helpers.
fn naive_ce(logits: &[f64], y: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logits.iter().map(|z| (z - m).exp()).sum();
    -((logits[y] - m).exp() / s).ln()
}

fn naive_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Brute-force balanced L_u straight from the definitions: per-class
/// thresholds `τ − Δ(1 − c_n/max c)`, weights `1/max(k_n, 1)`, Z the mean
/// included weight.
fn oracle_lu(method: u8, tau: f64, delta: f64, all: &[f64], confident: &[f64], weak: &[Vec<f64>], strong: &[Vec<f64>]) -> f64 {
    let n = all.len();
    let max_c = all.iter().copied().fold(0.0, f64::max);
    let thresholds: Vec<f64> = (0..n)
        .map(|c| if matches!(method, 1 | 4) && max_c > 0.0 { tau - delta * (1.0 - all[c] / max_c) } else { tau })
        .collect();
    let weights: Vec<f64> = (0..n)
        .map(|c| match method {
            2 => 1.0 / all[c].max(1.0),
            3 | 4 => 1.0 / confident[c].max(1.0),
            _ => 1.0,
        })
        .collect();
    let mu = weak.len();
    let mut terms = Vec::new();
    for b in 0..mu {
        let q = naive_softmax(&weak[b]);
        let mut label = 0;
        for c in 1..n {
            if q[c] > q[label] {
                label = c;
            }
        }
        if q[label] >= thresholds[label] {
            terms.push((weights[label], naive_ce(&strong[b], label)));
        }
    }
    let z = if matches!(method, 2..=4) && !terms.is_empty() {
        terms.iter().map(|t| t.0).sum::<f64>() / terms.len() as f64
    } else {
        1.0
    };
    terms.iter().map(|(w, h)| w * h).sum::<f64>() / (z * mu as f64)
}

/// Plain consistency loss: fixed threshold, unit weights, mean over the batch.
fn plain_consistency(tau: f64, weak: &Tensor, strong: &Tensor) -> f64 {
    let pseudo = pseudo_label(weak).unwrap();
    let mu = pseudo.len();
    let mut sum = 0.0;
    for b in 0..mu {
        if pseudo.confidences[b] >= tau {
            sum += boss_core::ssl::cross_entropy(strong.row(b), pseudo.labels[b]);
        }
    }
    sum / mu as f64
}

/// Counts fixed by feeding one exact-mode batch with the given histograms.
fn counts_from(all: &[usize], confident: &[usize]) -> ClassCounts {
    let n = all.len();
    let pool: usize = all.iter().sum::<usize>().max(1);
    let mut counts = ClassCounts::new(n, pool, CountMode::ExactEpoch).unwrap();
    let mut logits = Vec::new();
    let mut mask = Vec::new();
    for c in 0..n {
        for i in 0..all[c] {
            let mut row = vec![0.0; n];
            row[c] = 5.0;
            logits.extend(row);
            mask.push(i < confident[c]);
        }
    }
    if logits.is_empty() {
        return counts;
    }
    let rows = mask.len();
    let mut pseudo = pseudo_label(&Tensor::new(vec![rows, n], logits).unwrap()).unwrap();
    pseudo.mask = mask;
    counts.update(&pseudo).unwrap();
    counts
}

fn logits_strategy(mu: usize, n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-6.0f64..6.0, n), mu)
}

fn instance() -> impl Strategy<Value = (u8, f64, f64, Vec<usize>, Vec<usize>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (2usize..=4, 1usize..=8).prop_flat_map(|(n, mu)| {
        (
            0u8..=4,
            0.3f64..0.99,
            0.0f64..1.0,
            prop::collection::vec(0usize..30, n),
            prop::collection::vec(0.0f64..=1.0, n),
            logits_strategy(mu, n),
            logits_strategy(mu, n),
        )
            .prop_map(|(m, tau, dfrac, all, cfrac, weak, strong)| {
                let confident: Vec<usize> = all.iter().zip(&cfrac).map(|(&a, &f)| (a as f64 * f) as usize).collect();
                (m, tau, tau * dfrac * 0.99, all, confident, weak, strong)
            })
    })
}

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn balanced_loss_matches_term_by_term_oracle((m, tau, delta, all, confident, weak, strong) in instance()) {
        let counts = counts_from(&all, &confident);
        let config = BalanceConfig { method: BalanceMethod::try_from(m).unwrap(), tau, delta, lambda_u: 1.0 };
        let plan = balance_plan(&config, &counts).unwrap();
        let mut pseudo = pseudo_label(&tensor(&weak)).unwrap();
        let (lu, _, z) = plan.unsupervised_loss(&tensor(&strong), &mut pseudo).unwrap();
        let all_f: Vec<f64> = all.iter().map(|&v| v as f64).collect();
        let conf_f: Vec<f64> = confident.iter().map(|&v| v as f64).collect();
        let expected = oracle_lu(m, tau, delta, &all_f, &conf_f, &weak, &strong);
        prop_assert!((lu - expected).abs() <= 1e-12, "method {m}: {lu} vs {expected}");
        prop_assert!(z > 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn method_zero_is_bitwise_plain_consistency(
        (n, weak, strong, tau) in (2usize..=6, 1usize..=16).prop_flat_map(|(n, mu)| (Just(n), logits_strategy(mu, n), logits_strategy(mu, n), 0.3f64..0.99))
    ) {
        let config = BalanceConfig { method: BalanceMethod::Off, tau, delta: 0.0, lambda_u: 1.0 };
        // arbitrary (even skewed) counts must not matter for method 0
        let counts = counts_from(&(0..n).map(|c| 3 * c + 1).collect::<Vec<_>>(), &vec![0; n]);
        let plan = balance_plan(&config, &counts).unwrap();
        let mut pseudo = pseudo_label(&tensor(&weak)).unwrap();
        let (lu, _, z) = plan.unsupervised_loss(&tensor(&strong), &mut pseudo).unwrap();
        prop_assert_eq!(z, 1.0);
        prop_assert_eq!(lu.to_bits(), plain_consistency(tau, &tensor(&weak), &tensor(&strong)).to_bits());
    }

    #[test]
    fn equal_counts_make_weighting_neutral(
        (n, weak, strong, tau, k) in (2usize..=5, 1usize..=8).prop_flat_map(|(n, mu)| (Just(n), logits_strategy(mu, n), logits_strategy(mu, n), 0.2f64..0.9, 1usize..50))
    ) {
        let counts = counts_from(&vec![k; n], &vec![k; n]);
        let weak_t = tensor(&weak);
        let strong_t = tensor(&strong);
        let lu = |method| {
            let config = BalanceConfig { method, tau, delta: 0.0, lambda_u: 1.0 };
            let mut p = pseudo_label(&weak_t).unwrap();
            balance_plan(&config, &counts).unwrap().unsupervised_loss(&strong_t, &mut p).unwrap().0
        };
        let base = lu(BalanceMethod::Off);
        prop_assert!((lu(BalanceMethod::WeightAll) - base).abs() <= 1e-12);
        prop_assert!((lu(BalanceMethod::WeightConfident) - base).abs() <= 1e-12);
    }

    #[test]
    fn thresholds_are_bounded_and_monotone(
        counts in prop::collection::vec(0.0f64..1000.0, 2..10),
        tau in 0.1f64..0.99,
        frac in 0.0f64..1.0,
    ) {
        let delta = tau * frac * 0.99;
        let t = class_thresholds(&counts, tau, delta);
        let max = counts.iter().copied().fold(0.0, f64::max);
        for i in 0..counts.len() {
            prop_assert!(t[i] >= tau - delta - 1e-15 && t[i] <= tau);
            if counts[i] == max {
                prop_assert_eq!(t[i], tau);
            }
            for j in 0..counts.len() {
                if counts[i] <= counts[j] {
                    prop_assert!(t[i] <= t[j]);
                }
            }
        }
    }

    #[test]
    fn lowered_thresholds_only_add_rows(
        (all, weak, tau, frac) in (2usize..=5, 1usize..=16).prop_flat_map(|(n, mu)| (prop::collection::vec(0usize..40, n), logits_strategy(mu, n), 0.3f64..0.99, 0.0f64..1.0))
    ) {
        let counts = counts_from(&all, &vec![0; all.len()]);
        let mask = |method, delta| {
            let plan = balance_plan(&BalanceConfig { method, tau, delta, lambda_u: 1.0 }, &counts).unwrap();
            let mut p = pseudo_label(&tensor(&weak)).unwrap();
            p.apply_thresholds(&plan.thresholds).unwrap();
            p.mask
        };
        let off = mask(BalanceMethod::Off, 0.0);
        let lowered = mask(BalanceMethod::Threshold, tau * frac * 0.99);
        for (a, b) in off.iter().zip(&lowered) {
            prop_assert!(!a || *b);
        }
    }

    #[test]
    fn raising_tau_never_adds_rows(
        (weak, t1, t2) in (2usize..=5, 1usize..=16).prop_flat_map(|(n, mu)| (logits_strategy(mu, n), 0.0f64..1.0, 0.0f64..1.0))
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let included = |tau| {
            let mut p = pseudo_label(&tensor(&weak)).unwrap();
            let n = p.num_classes();
            p.apply_thresholds(&vec![tau; n]).unwrap();
            p.included()
        };
        prop_assert!(included(hi) <= included(lo));
    }

    #[test]
    fn exact_counts_bound_confident_by_all(
        batches in prop::collection::vec(prop::collection::vec((0usize..4, any::<bool>()), 0..20), 1..5)
    ) {
        let pool: usize = batches.iter().map(Vec::len).sum::<usize>().max(1);
        let mut counts = ClassCounts::new(4, pool, CountMode::ExactEpoch).unwrap();
        for batch in &batches {
            let logits: Vec<f64> = batch.iter().flat_map(|&(c, _)| {
                let mut row = vec![0.0; 4];
                row[c] = 3.0;
                row
            }).collect();
            if batch.is_empty() {
                continue;
            }
            let mut p: PseudoBatch = pseudo_label(&Tensor::new(vec![batch.len(), 4], logits).unwrap()).unwrap();
            p.mask = batch.iter().map(|&(_, m)| m).collect();
            counts.update(&p).unwrap();
        }
        let (all, conf) = (counts.all(), counts.confident());
        prop_assert!((all.iter().sum::<f64>() - batches.iter().map(Vec::len).sum::<usize>() as f64).abs() < 1e-9);
        for c in 0..4 {
            prop_assert!(conf[c] <= all[c] && conf[c] >= 0.0);
        }
    }
}

#[test]
fn thresholds_hand_values() {
    assert_eq!(class_thresholds(&[100.0, 50.0, 0.0], 0.95, 0.25), vec![0.95, 0.825, 0.7]);
    assert_eq!(class_thresholds(&[10.0, 10.0, 10.0], 0.95, 0.25), vec![0.95; 3]);
    assert_eq!(class_thresholds(&[7.0, 0.0, 3.0], 0.95, 0.0), vec![0.95; 3]);
    assert_eq!(class_thresholds(&[0.0, 0.0], 0.9, 0.25), vec![0.9; 2]);
}

#[test]
fn hybrid_plan_hand_values() {
    let counts = counts_from(&[100, 50, 0], &[40, 5, 0]);
    let config = BalanceConfig { method: BalanceMethod::Hybrid, tau: 0.95, delta: 0.25, lambda_u: 1.0 };
    let plan = balance_plan(&config, &counts).unwrap();
    assert_eq!(plan.thresholds, vec![0.95, 0.825, 0.7]);
    assert_eq!(plan.weights, vec![1.0 / 40.0, 1.0 / 5.0, 1.0]);
}

#[test]
fn minority_row_share_of_weighted_loss() {
    // one included row per class with identical CE; weights 1/90 and 1/10
    let counts = counts_from(&[90, 10], &[90, 10]);
    let plan = balance_plan(&BalanceConfig { method: BalanceMethod::WeightAll, tau: 0.5, delta: 0.0, lambda_u: 1.0 }, &counts).unwrap();
    let weak = Tensor::new(vec![2, 2], vec![5.0, 0.0, 0.0, 5.0]).unwrap();
    let strong = Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
    let mut p = pseudo_label(&weak).unwrap();
    let (lu, _, z) = plan.unsupervised_loss(&strong, &mut p).unwrap();
    assert!((z - (1.0 / 90.0 + 0.1) / 2.0).abs() < 1e-15);
    let minority = (0.1 / z) * 2f64.ln() / 2.0;
    assert!((minority / lu - 0.9).abs() < 1e-12);
}

#[test]
fn unbalanced_plan_is_identity() {
    let p = BalancePlan::unbalanced(3, 0.95);
    assert_eq!((p.thresholds, p.weights, p.normalized), (vec![0.95; 3], vec![1.0; 3], false));
}
