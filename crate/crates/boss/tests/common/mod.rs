#![allow(dead_code)]

use boss::store::Engine;
use boss_core::metrics::{CountSnapshot, EvalRecord, RunMetrics};
use boss_core::synthetic::SyntheticSpec;
use boss_core::trainer::RunConfig;
use serde_json::{json, Value};

pub fn engine() -> (tempfile::TempDir, Engine) {
    let dir = tempfile::tempdir().unwrap();
    let engine = Engine::open(dir.path()).unwrap();
    (dir, engine)
}

pub fn small_spec() -> SyntheticSpec {
    SyntheticSpec { num_classes: 4, samples_per_class: 60, image_size: 8, difficulty: 0.3, ..Default::default() }
}

/// A run of a few dozen steps on a tiny network.
pub fn small_config(dataset_id: &str, set_id: u32) -> RunConfig {
    RunConfig {
        dataset_id: dataset_id.into(),
        prototype_set_id: set_id,
        batch_size: 8,
        unlabeled_ratio: 2,
        total_kimg: 1.0,
        lr: 0.03,
        widths: [4, 8, 8],
        ..RunConfig::default()
    }
}

/// Checks `value` against `$defs/<def>` of the published schema.
pub fn assert_schema(def: &str, value: &Value) {
    let mut schema: Value = serde_json::from_str(boss::service::SCHEMA).unwrap();
    schema["$ref"] = json!(format!("#/$defs/{def}"));
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(value).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{def} violations: {errors:#?}\n{value:#}");
}

fn trajectory(points: &[(f64, Vec<f64>)]) -> RunMetrics {
    let mut running: f64 = 0.0;
    let evals = points
        .iter()
        .enumerate()
        .map(|(i, (acc, per_class))| {
            running = running.max(*acc);
            EvalRecord {
                step: 100 * (i as u64 + 1),
                accuracy: *acc,
                per_class: per_class.clone(),
                running_max: running,
                counts: CountSnapshot::default(),
            }
        })
        .collect();
    RunMetrics { steps: Vec::new(), evals, divergence: None }
}

/// Accuracy climbs to about 80%, collapses to 50% and recovers only to 65%.
pub fn collapse_trajectory() -> RunMetrics {
    let curve = [0.30, 0.45, 0.58, 0.67, 0.73, 0.77, 0.79, 0.80, 0.62, 0.50, 0.52, 0.56, 0.60, 0.62, 0.64, 0.65];
    trajectory(&curve.iter().map(|&a| (a, vec![a; 4])).collect::<Vec<_>>())
}

/// Accuracy stalls at 77% early on while class 3 stays near zero.
pub fn plateau_trajectory() -> RunMetrics {
    let mut points: Vec<(f64, Vec<f64>)> = vec![
        (0.40, vec![0.55, 0.50, 0.50, 0.05]),
        (0.60, vec![0.80, 0.75, 0.80, 0.05]),
        (0.72, vec![0.95, 0.95, 0.90, 0.08]),
    ];
    for i in 0..13 {
        let wobble = if i % 2 == 0 { 0.004 } else { -0.004 };
        let per_class = vec![1.0, 1.0, 1.0, 0.08 + 4.0 * wobble];
        points.push((per_class.iter().sum::<f64>() / 4.0, per_class));
    }
    trajectory(&points)
}
