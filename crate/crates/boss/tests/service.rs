mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use boss::service::router;
use boss::store::Engine;
use boss_core::synthetic::SyntheticSpec;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use common::{assert_schema, small_config, small_spec};

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, Method::GET, uri, None).await
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    call(app, Method::POST, uri, Some(body)).await
}

fn app() -> (tempfile::TempDir, Arc<Engine>, Router) {
    let (dir, engine) = common::engine();
    let engine = Arc::new(engine);
    (dir, engine.clone(), router(engine))
}

async fn dataset_and_set(app: &Router) -> (String, u32) {
    dataset_and_set_from(app, small_spec()).await
}

async fn dataset_and_set_from(app: &Router, spec: SyntheticSpec) -> (String, u32) {
    let (s, info) = post(app, "/datasets/synthetic", serde_json::to_value(spec).unwrap()).await;
    assert_eq!(s, StatusCode::OK, "{info}");
    assert_schema("DatasetInfo", &info);
    let id = info["dataset_id"].as_str().unwrap().to_string();
    // one index per class from the audit listing
    let (_, page) = get(app, &format!("/datasets/{id}/samples?limit=40&audit=true")).await;
    let mut classes = vec![Vec::new(); 4];
    for s in page["samples"].as_array().unwrap() {
        let c = s["label"].as_u64().unwrap() as usize;
        if classes[c].is_empty() {
            classes[c].push(s["index"].as_u64().unwrap());
        }
    }
    let (s, set) = post(app, "/prototype-sets", json!({ "dataset_id": id, "classes": classes })).await;
    assert_eq!(s, StatusCode::OK, "{set}");
    assert_schema("ProtosetView", &set);
    (id, set["set_id"].as_u64().unwrap() as u32)
}

async fn wait_terminal(app: &Router, run: &str) -> Value {
    let start = Instant::now();
    loop {
        let (s, summary) = get(app, &format!("/runs/{run}")).await;
        assert_eq!(s, StatusCode::OK);
        assert_schema("RunSummary", &summary);
        if ["completed", "diverged", "failed"].contains(&summary["state"].as_str().unwrap()) {
            return summary;
        }
        assert!(start.elapsed() < Duration::from_secs(300), "run {run} did not finish");
        std::thread::sleep(Duration::from_millis(50));
    }
}

#[tokio::test]
async fn sample_listing_withholds_labels_by_default() {
    let (_d, _e, app) = app();
    let (id, _) = dataset_and_set(&app).await;
    let (s, page) = get(&app, &format!("/datasets/{id}/samples?offset=5&limit=7")).await;
    assert_eq!(s, StatusCode::OK);
    assert_schema("SamplePage", &page);
    assert_eq!(page["samples"].as_array().unwrap().len(), 7);
    assert_eq!(page["split"], "train");
    assert!(page["samples"].as_array().unwrap().iter().all(|s| s.get("label").is_none()));
    let (_, test_page) = get(&app, &format!("/datasets/{id}/samples?unlabeled=false&limit=3")).await;
    assert_schema("SamplePage", &test_page);
    assert_eq!(test_page["split"], "test");
    let (_, audit) = get(&app, &format!("/datasets/{id}/samples?limit=3&audit=true")).await;
    assert_schema("AuditSamplePage", &audit);
    // an audited page is not a valid default page
    let mut schema: Value = serde_json::from_str(boss::service::SCHEMA).unwrap();
    schema["$ref"] = json!("#/$defs/SamplePage");
    assert!(!jsonschema::validator_for(&schema).unwrap().is_valid(&audit));
}

#[tokio::test]
async fn errors_map_to_statuses() {
    let (_d, _e, app) = app();
    let (id, set) = dataset_and_set(&app).await;
    let (s, body) = get(&app, "/runs/run-9999").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_schema("Error", &body);
    assert_eq!(get(&app, "/datasets/nope/samples").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/prototype-sets/77").await.0, StatusCode::NOT_FOUND);
    assert_eq!(post(&app, "/prototype-sets/77/replace", json!({ "class": 0, "index": 1 })).await.0, StatusCode::NOT_FOUND);
    // picking an existing prototype
    let (_, view) = get(&app, &format!("/prototype-sets/{set}")).await;
    let existing = view["set"]["classes"][1][0].clone();
    let (s, body) = post(&app, &format!("/prototype-sets/{set}/replace"), json!({ "class": 0, "index": existing })).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_schema("Error", &body);
    // invalid bodies and configs
    assert_eq!(post(&app, "/prototype-sets", json!({ "dataset_id": id, "classes": [[0]] })).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(post(&app, "/runs", json!({ "dataset_id": id, "prototype_set_id": set, "lr": -1.0 })).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(post(&app, "/runs", json!({ "dataset_id": id, "bogus": 1 })).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(post(&app, "/runs", json!({ "preset": "imagenet" })).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(post(&app, "/runs", json!({ "dataset_id": "nope", "prototype_set_id": set })).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(post(&app, "/datasets/synthetic", json!({ "num_classes": 1 })).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(post(&app, "/datasets/synthetic", json!("not an object")).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn run_lifecycle_and_read_endpoints() {
    let (_d, _e, app) = app();
    let (id, set) = dataset_and_set(&app).await;
    let (s, created) = post(&app, "/runs", serde_json::to_value(small_config(&id, set)).unwrap()).await;
    assert_eq!(s, StatusCode::OK, "{created}");
    assert_schema("RunCreated", &created);
    let run = created["run_id"].as_str().unwrap().to_string();

    // the metric stream only grows while the run is polled
    let mut seen = 0;
    let summary = loop {
        let (_, page) = get(&app, &format!("/runs/{run}/metrics")).await;
        assert_schema("MetricsPage", &page);
        let records = page["records"].as_array().unwrap();
        assert!(records.len() >= seen);
        let steps: Vec<u64> = records.iter().map(|r| r["step"].as_u64().unwrap()).collect();
        assert!(steps.windows(2).all(|w| w[0] <= w[1]), "{steps:?}");
        seen = records.len();
        let (_, summary) = get(&app, &format!("/runs/{run}")).await;
        if summary["state"] == "completed" {
            break summary;
        }
        std::thread::sleep(Duration::from_millis(20));
    };
    assert_schema("RunSummary", &summary);
    assert!(summary["diagnosis"].is_object());

    let (_, since) = get(&app, &format!("/runs/{run}/metrics?since=20")).await;
    assert!(since["records"].as_array().unwrap().iter().all(|r| r["step"].as_u64().unwrap() >= 20));

    let (_, acc) = get(&app, &format!("/runs/{run}/class-accuracies")).await;
    assert_schema("ClassAccuracies", &acc);
    assert_eq!(acc["latest"]["per_class"].as_array().unwrap().len(), 4);
    assert_eq!(acc["latest"], *acc["history"].as_array().unwrap().last().unwrap());

    let (_, counts) = get(&app, &format!("/runs/{run}/class-counts")).await;
    assert_schema("ClassCounts", &counts);
    assert_eq!(counts["thresholds"].as_array().unwrap().len(), 4);

    let (_, diag) = get(&app, &format!("/runs/{run}/diagnosis")).await;
    assert_schema("Diagnosis", &diag);

    let (_, pl) = get(&app, &format!("/runs/{run}/pseudo-labels")).await;
    assert_schema("PseudoLabelPage", &pl);
    let recs = pl["records"].as_array().unwrap();
    assert_eq!(recs.len(), pl["total"].as_u64().unwrap() as usize);
    assert!(recs.iter().all(|r| r.get("true_label").is_none()));
    let conf: Vec<f64> = recs.iter().map(|r| r["confidence"].as_f64().unwrap()).collect();
    assert!(conf.windows(2).all(|w| w[0] >= w[1]));

    let (_, top) = get(&app, &format!("/runs/{run}/pseudo-labels?top=3&class=2&audit=true")).await;
    assert_schema("PseudoLabelPage", &top);
    let top = top["records"].as_array().unwrap();
    assert!(top.len() <= 3);
    assert!(top.iter().all(|r| r["label"] == 2 && r.get("true_label").is_some()));

    let (_, list) = get(&app, "/runs").await;
    assert_schema("RunList", &list);
    let (_, sets) = get(&app, "/prototype-sets").await;
    assert_schema("ProtosetList", &sets);
    let (_, presets) = get(&app, "/presets").await;
    assert_schema("Presets", &presets);
    assert!(presets["presets"].as_array().unwrap().contains(&json!("cifar-balance1")));
    let (_, datasets) = get(&app, "/datasets").await;
    assert_schema("DatasetList", &datasets);

    // stop is idempotent on a finished run
    let (s1, a) = post(&app, &format!("/runs/{run}/stop"), json!({})).await;
    let (s2, b) = post(&app, &format!("/runs/{run}/stop"), json!({})).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(a, b);
    assert_eq!(a["state"], "completed");
    assert_eq!(a["stopped"], false);
}

#[tokio::test]
async fn stopping_a_running_run_is_idempotent() {
    let (_d, _e, app) = app();
    let (id, set) = dataset_and_set(&app).await;
    let mut config = serde_json::to_value(small_config(&id, set)).unwrap();
    config["total_kimg"] = json!(200.0);
    let (_, created) = post(&app, "/runs", config).await;
    let run = created["run_id"].as_str().unwrap().to_string();
    std::thread::sleep(Duration::from_millis(200));
    let (_, first) = post(&app, &format!("/runs/{run}/stop"), json!({})).await;
    assert_schema("RunSummary", &first);
    assert_eq!(first["state"], "completed");
    assert_eq!(first["stopped"], true);
    let (_, second) = post(&app, &format!("/runs/{run}/stop"), json!({})).await;
    assert_eq!(first, second);
    // a stopped run still ends with an evaluation of its last step
    let last_step = first["latest_step"]["step"].as_u64().unwrap();
    assert_eq!(first["latest_eval"]["step"].as_u64().unwrap(), last_step + 1);
}

#[tokio::test]
async fn refine_workflow_forks_prototype_sets() {
    let (_d, _e, app) = app();
    let (id, set) = dataset_and_set(&app).await;
    let (_, created) = post(&app, "/runs", serde_json::to_value(small_config(&id, set)).unwrap()).await;
    let first = created["run_id"].as_str().unwrap().to_string();
    wait_terminal(&app, &first).await;

    // flag the weakest class and replace its prototype
    let (_, acc) = get(&app, &format!("/runs/{first}/class-accuracies")).await;
    let per_class: Vec<f64> = acc["latest"]["per_class"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let weak = (0..4).min_by(|&a, &b| per_class[a].total_cmp(&per_class[b])).unwrap();
    let (_, page) = get(&app, &format!("/datasets/{id}/samples?offset=100&limit=40&audit=true")).await;
    let pick = page["samples"].as_array().unwrap().iter().find(|s| s["label"] == weak).unwrap()["index"].clone();
    let (s, new_set) = post(&app, &format!("/prototype-sets/{set}/replace"), json!({ "class": weak, "index": pick })).await;
    assert_eq!(s, StatusCode::OK, "{new_set}");
    assert_schema("ProtosetView", &new_set);
    let new_id = new_set["set_id"].as_u64().unwrap() as u32;
    assert_eq!(new_set["lineage"], json!([new_id, set]));
    assert_eq!(new_set["set"]["parent"], json!(set));
    assert_eq!(new_set["set"]["provenance"], "replaced");
    assert_eq!(new_set["set"]["classes"][weak][0], pick);

    let (_, created) = post(&app, "/runs", serde_json::to_value(small_config(&id, new_id)).unwrap()).await;
    let second = created["run_id"].as_str().unwrap().to_string();
    let summary = wait_terminal(&app, &second).await;
    assert_eq!(summary["state"], "completed");
    assert_eq!(summary["lineage"]["prototype_lineage"], json!([new_id, set]));
    assert_eq!(summary["lineage"]["prototype_set_id"], json!(new_id));
}

#[tokio::test]
async fn self_train_launch_and_sequencing() {
    let (_d, engine, app) = app();
    // large enough for the default preset's unlabeled batch of 448
    let (id, set) = dataset_and_set_from(&app, SyntheticSpec { samples_per_class: 150, ..small_spec() }).await;
    let mut config = serde_json::to_value(small_config(&id, set)).unwrap();
    config["total_kimg"] = json!(200.0);
    let (_, created) = post(&app, "/runs", config).await;
    let long = created["run_id"].as_str().unwrap().to_string();
    // an unfinished source is an illegal transition
    let (s, body) = post(&app, &format!("/runs/{long}/self-train"), json!({ "k_per_class": 2 })).await;
    assert_eq!(s, StatusCode::CONFLICT, "{body}");
    post(&app, &format!("/runs/{long}/stop"), json!({})).await;

    let (_, created) = post(&app, "/runs", serde_json::to_value(small_config(&id, set)).unwrap()).await;
    let source = created["run_id"].as_str().unwrap().to_string();
    wait_terminal(&app, &source).await;
    assert_eq!(post(&app, &format!("/runs/{source}/self-train"), json!({ "k_per_class": 0 })).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, launch) = post(
        &app,
        &format!("/runs/{source}/self-train"),
        json!({ "k_per_class": 3, "preset": "source", "overrides": { "seed": 5 } }),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{launch}");
    assert_schema("SelfTrainLaunch", &launch);
    assert_eq!(launch["plan"]["labeled_set"]["provenance"], "self_train_augmented");
    let child = launch["run_id"].as_str().unwrap().to_string();
    let summary = wait_terminal(&app, &child).await;
    assert_eq!(summary["lineage"]["source_run"], json!(source));
    assert_eq!(summary["config"]["seed"], 5);
    assert_eq!(summary["purity"], launch["plan"]["purity"]);
    let plan_path = engine.run_dir(&child).unwrap().join("plan.json");
    assert!(plan_path.is_file());

    // the default preset restores the Cifar self-training hyper-parameters
    let (s, launch) = post(&app, &format!("/runs/{source}/self-train"), json!({ "k_per_class": 1, "overrides": { "total_kimg": 0.5 } })).await;
    assert_eq!(s, StatusCode::OK, "{launch}");
    let (_, summary) = get(&app, &format!("/runs/{}", launch["run_id"].as_str().unwrap())).await;
    let c = &summary["config"];
    assert_eq!((c["weight_decay"].as_f64(), c["lr"].as_f64(), c["batch_size"].as_u64()), (Some(5e-4), Some(0.03), Some(64)));
    assert_eq!((c["unlabeled_ratio"].as_u64(), c["balance"]["method"].as_u64()), (Some(7), Some(4)));
    wait_terminal(&app, launch["run_id"].as_str().unwrap()).await;

    // missing dump files are a sequencing error
    std::fs::remove_file(engine.dump_dir(&source).unwrap().join(boss::dump::CONFIDENCES)).unwrap();
    let (s, body) = post(&app, &format!("/runs/{source}/self-train"), json!({ "k_per_class": 1 })).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(body["error"], "sequencing");
    assert_eq!(get(&app, &format!("/runs/{source}/pseudo-labels")).await.0, StatusCode::CONFLICT);
}

#[tokio::test]
async fn schema_endpoint_serves_the_document() {
    let (_d, _e, app) = app();
    let (s, doc) = get(&app, "/schema").await;
    assert_eq!(s, StatusCode::OK);
    assert!(doc["$defs"]["RunSummary"].is_object());
    jsonschema::validator_for(&doc).unwrap();
}
