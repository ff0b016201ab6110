//! HTTP/JSON facade over the [`Engine`].

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use boss_core::diagnosis::Diagnosis;
use boss_core::synthetic::SyntheticSpec;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{AppError, Result};
use crate::store::{
    resolve_config, ClassAccuracies, ClassCountsView, DatasetInfo, Engine, MetricLine, ProtosetView, PseudoLabelPage,
    RunSummary, SamplePage, SelfTrainLaunch, SelfTrainRequest,
};

/// JSON schema of every response body, keyed under `$defs`.
pub const SCHEMA: &str = include_str!("../schema/api.json");

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(json!({ "error": self.kind(), "message": self.to_string() }))).into_response()
    }
}

type Shared = State<Arc<Engine>>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<Json<T>> {
    tokio::task::spawn_blocking(f).await.map_err(|e| AppError::Io(std::io::Error::other(e)))?.map(Json)
}

fn body<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<T> {
    Ok(serde_json::from_slice(bytes)?)
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/schema", get(schema))
        .route("/presets", get(presets))
        .route("/datasets", get(list_datasets))
        .route("/datasets/synthetic", post(create_synthetic))
        .route("/datasets/cifar10", post(ingest_cifar10))
        .route("/datasets/{id}", get(dataset_info))
        .route("/datasets/{id}/samples", get(samples))
        .route("/prototype-sets", get(list_protosets).post(create_protoset))
        .route("/prototype-sets/{id}", get(get_protoset))
        .route("/prototype-sets/{id}/replace", post(replace_prototype))
        .route("/runs", get(list_runs).post(create_run))
        .route("/runs/{id}", get(run_summary))
        .route("/runs/{id}/metrics", get(run_metrics))
        .route("/runs/{id}/class-accuracies", get(class_accuracies))
        .route("/runs/{id}/class-counts", get(class_counts))
        .route("/runs/{id}/diagnosis", get(diagnosis))
        .route("/runs/{id}/pseudo-labels", get(pseudo_labels))
        .route("/runs/{id}/self-train", post(self_train))
        .route("/runs/{id}/stop", post(stop))
        .with_state(engine)
}

/// Serves until Ctrl-C.
pub async fn serve(engine: Arc<Engine>, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, root = %engine.root().display(), "serving");
    axum::serve(listener, router(engine))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn schema() -> impl IntoResponse {
    ([(header::CONTENT_TYPE, "application/schema+json")], SCHEMA)
}

#[derive(Serialize)]
struct Presets {
    presets: Vec<String>,
}

async fn presets() -> Json<Presets> {
    Json(Presets { presets: boss_core::presets::names() })
}

#[derive(Serialize)]
struct DatasetList {
    datasets: Vec<String>,
}

async fn list_datasets(State(e): Shared) -> Result<Json<DatasetList>> {
    blocking(move || Ok(DatasetList { datasets: e.dataset_ids() })).await
}

async fn create_synthetic(State(e): Shared, bytes: Bytes) -> Result<Json<DatasetInfo>> {
    let spec: SyntheticSpec = body(&bytes)?;
    blocking(move || e.create_synthetic(spec)).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CifarRequest {
    train: Vec<PathBuf>,
    #[serde(default)]
    test: Vec<PathBuf>,
    #[serde(default = "default_test_fraction")]
    test_fraction: f64,
    #[serde(default)]
    seed: u64,
}

fn default_test_fraction() -> f64 {
    0.2
}

async fn ingest_cifar10(State(e): Shared, bytes: Bytes) -> Result<Json<DatasetInfo>> {
    let req: CifarRequest = body(&bytes)?;
    blocking(move || e.ingest_cifar10(req.train, req.test, req.test_fraction, req.seed)).await
}

async fn dataset_info(State(e): Shared, Path(id): Path<String>) -> Result<Json<DatasetInfo>> {
    blocking(move || e.dataset_info(&id)).await
}

#[derive(Deserialize)]
struct SamplesQuery {
    #[serde(default)]
    offset: usize,
    #[serde(default = "default_limit")]
    limit: usize,
    #[serde(default = "yes")]
    unlabeled: bool,
    #[serde(default)]
    audit: bool,
}

fn default_limit() -> usize {
    50
}

fn yes() -> bool {
    true
}

const MAX_PAGE: usize = 500;

async fn samples(State(e): Shared, Path(id): Path<String>, Query(q): Query<SamplesQuery>) -> Result<Json<SamplePage>> {
    if q.limit > MAX_PAGE {
        return Err(AppError::Invalid(format!("limit must be at most {MAX_PAGE}")));
    }
    blocking(move || e.samples(&id, q.offset, q.limit, q.unlabeled, q.audit)).await
}

#[derive(Serialize)]
struct ProtosetList {
    sets: Vec<boss_core::data::PrototypeSet>,
}

async fn list_protosets(State(e): Shared) -> Result<Json<ProtosetList>> {
    blocking(move || Ok(ProtosetList { sets: e.protosets() })).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateProtoset {
    dataset_id: String,
    classes: Vec<Vec<usize>>,
}

async fn create_protoset(State(e): Shared, bytes: Bytes) -> Result<Json<ProtosetView>> {
    let req: CreateProtoset = body(&bytes)?;
    blocking(move || e.create_protoset(&req.dataset_id, req.classes)).await
}

async fn get_protoset(State(e): Shared, Path(id): Path<u32>) -> Result<Json<ProtosetView>> {
    blocking(move || e.protoset(id)).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReplaceRequest {
    class: usize,
    index: usize,
}

async fn replace_prototype(State(e): Shared, Path(id): Path<u32>, bytes: Bytes) -> Result<Json<ProtosetView>> {
    let req: ReplaceRequest = body(&bytes)?;
    blocking(move || e.replace_prototype(id, req.class, req.index)).await
}

#[derive(Serialize)]
struct RunList {
    runs: Vec<RunSummary>,
}

async fn list_runs(State(e): Shared) -> Result<Json<RunList>> {
    blocking(move || Ok(RunList { runs: e.run_ids().iter().map(|id| e.summary(id)).collect::<Result<_>>()? })).await
}

#[derive(Serialize)]
struct RunCreated {
    run_id: String,
}

/// Body: a (partial) run config, optionally with a `preset` name applied
/// before the other fields.
async fn create_run(State(e): Shared, bytes: Bytes) -> Result<Json<RunCreated>> {
    let mut value: Value = body(&bytes)?;
    let preset = match value.as_object_mut().and_then(|o| o.remove("preset")) {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s),
        Some(_) => return Err(AppError::Invalid("preset must be a string".into())),
    };
    let config = resolve_config(preset.as_deref(), &value)?;
    blocking(move || Ok(RunCreated { run_id: e.start_run(config)? })).await
}

async fn run_summary(State(e): Shared, Path(id): Path<String>) -> Result<Json<RunSummary>> {
    blocking(move || e.summary(&id)).await
}

#[derive(Deserialize)]
struct MetricsQuery {
    #[serde(default)]
    since: u64,
}

#[derive(Serialize)]
struct MetricsPage {
    run_id: String,
    records: Vec<MetricLine>,
}

async fn run_metrics(State(e): Shared, Path(id): Path<String>, Query(q): Query<MetricsQuery>) -> Result<Json<MetricsPage>> {
    blocking(move || Ok(MetricsPage { records: e.metric_lines(&id, q.since)?, run_id: id })).await
}

async fn class_accuracies(State(e): Shared, Path(id): Path<String>) -> Result<Json<ClassAccuracies>> {
    blocking(move || e.class_accuracies(&id)).await
}

async fn class_counts(State(e): Shared, Path(id): Path<String>) -> Result<Json<ClassCountsView>> {
    blocking(move || e.class_counts(&id)).await
}

async fn diagnosis(State(e): Shared, Path(id): Path<String>) -> Result<Json<Diagnosis>> {
    blocking(move || e.diagnosis(&id)).await
}

#[derive(Deserialize)]
struct PseudoQuery {
    top: Option<usize>,
    class: Option<usize>,
    #[serde(default)]
    audit: bool,
}

async fn pseudo_labels(State(e): Shared, Path(id): Path<String>, Query(q): Query<PseudoQuery>) -> Result<Json<PseudoLabelPage>> {
    blocking(move || e.pseudo_labels(&id, q.top, q.class, q.audit)).await
}

async fn self_train(State(e): Shared, Path(id): Path<String>, bytes: Bytes) -> Result<Json<SelfTrainLaunch>> {
    let req: SelfTrainRequest = body(&bytes)?;
    blocking(move || e.self_train(&id, &req)).await
}

async fn stop(State(e): Shared, Path(id): Path<String>) -> Result<Json<RunSummary>> {
    blocking(move || e.stop(&id)).await
}
