//! The run root on disk and the engine that trains runs in background
//! threads.
//!
//! ```text
//! <root>/datasets/<id>.json         dataset source (regenerated on load)
//! <root>/protosets/<id>.json        prototype-set versions
//! <root>/runs/<id>/config.json
//! <root>/runs/<id>/metrics.jsonl    step, eval and divergence records
//! <root>/runs/<id>/summary.json
//! <root>/runs/<id>/plan.json        self-training plan (child runs only)
//! <root>/runs/<id>/checkpoints/{best,final}.ckpt
//! <root>/runs/<id>/dump/            pseudo-label dump of the final model
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::thread::JoinHandle;

use base64::Engine as _;
use boss_core::data::{Dataset, LabelUse, PrototypeRegistry, PrototypeSet};
use boss_core::diagnosis::{diagnose, Diagnosis};
use boss_core::metrics::{DivergenceEvent, EvalRecord, RunMetrics, StepRecord};
use boss_core::nn::Classifier;
use boss_core::selftrain::{self, SelfTrainPlan};
use boss_core::synthetic::{self, SyntheticSpec};
use boss_core::trainer::{self, Evaluation, RunConfig, RunStatus, TrainObserver};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{not_found, AppError, Result};
use crate::{checkpoint, cifar, dump, thumbnail};

/// Environment variable naming the run root.
pub const ROOT_ENV: &str = "BOSS_RUN_ROOT";
pub const DEFAULT_ROOT: &str = "boss-runs";
/// Preset applied to self-training runs unless the request names another.
pub const DEFAULT_SELFTRAIN_PRESET: &str = "cifar-selftrain";
/// Self-training preset value that keeps the source run's hyper-parameters.
pub const KEEP_SOURCE_PRESET: &str = "source";

/// Writes through a temporary file and a rename so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| AppError::Format(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| AppError::Format(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic { spec: SyntheticSpec },
    Cifar10 { train: Vec<PathBuf>, test: Vec<PathBuf>, test_fraction: f64, seed: u64 },
}

impl DatasetSource {
    fn build(&self, id: &str) -> Result<Dataset> {
        match self {
            DatasetSource::Synthetic { spec } => {
                let mut ds = synthetic::generate(spec)?;
                ds.id = id.to_string();
                Ok(ds)
            }
            DatasetSource::Cifar10 { train, test, test_fraction, seed } => {
                cifar::ingest(id, train, test, *test_fraction, *seed)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetRecord {
    id: String,
    source: DatasetSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub dataset_id: String,
    pub num_classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub image_shape: [usize; 3],
    pub source: DatasetSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub index: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub png_base64: String,
    /// True label; present only for audit listings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePage {
    pub dataset_id: String,
    /// `train` (the unlabeled pool) or `test`.
    pub split: String,
    pub total: usize,
    pub offset: usize,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtosetView {
    pub set_id: u32,
    pub set: PrototypeSet,
    /// Ids from this set back to its root.
    pub lineage: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Pending,
    Running,
    Diverged,
    Completed,
    /// The run could not execute (bad inputs found late, I/O failure, or the
    /// process exited while it was running).
    Failed,
}

impl RunState {
    pub fn is_terminal(self) -> bool {
        matches!(self, RunState::Diverged | RunState::Completed | RunState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub source_run: Option<String>,
    pub prototype_set_id: u32,
    /// Prototype-set ids from the run's set back to its root.
    pub prototype_lineage: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub state: RunState,
    /// Set when a stop request ended the run early.
    pub stopped: bool,
    pub config: RunConfig,
    pub total_steps: u64,
    pub latest_step: Option<StepRecord>,
    pub latest_eval: Option<EvalRecord>,
    pub best_accuracy: Option<f64>,
    pub diagnosis: Option<Diagnosis>,
    pub divergence: Option<DivergenceEvent>,
    pub lineage: Lineage,
    /// Share of self-training promotions whose pseudo-label is correct.
    pub purity: Option<f64>,
    pub error: Option<String>,
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricLine {
    Step(StepRecord),
    Eval(EvalRecord),
    Divergence(DivergenceEvent),
}

impl MetricLine {
    pub fn step(&self) -> u64 {
        match self {
            MetricLine::Step(r) => r.step,
            MetricLine::Eval(r) => r.step,
            MetricLine::Divergence(r) => r.step,
        }
    }
}

/// Metric lines in the order they were produced. Step records count from 0
/// and an eval at step `k` follows the first `k` steps.
pub fn metric_lines(metrics: &RunMetrics) -> Vec<MetricLine> {
    let mut out = Vec::with_capacity(metrics.steps.len() + metrics.evals.len() + 1);
    let mut evals = metrics.evals.iter().peekable();
    for s in &metrics.steps {
        while let Some(e) = evals.next_if(|e| e.step <= s.step) {
            out.push(MetricLine::Eval(e.clone()));
        }
        out.push(MetricLine::Step(s.clone()));
    }
    out.extend(evals.map(|e| MetricLine::Eval(e.clone())));
    if let Some(d) = &metrics.divergence {
        out.push(MetricLine::Divergence(d.clone()));
    }
    out
}

pub fn read_metrics(path: &Path) -> Result<RunMetrics> {
    let mut metrics = RunMetrics::default();
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricLine =
            serde_json::from_str(&line).map_err(|e| AppError::Format(format!("{} line {}: {e}", path.display(), n + 1)))?;
        match rec {
            MetricLine::Step(s) => metrics.steps.push(s),
            MetricLine::Eval(e) => metrics.evals.push(e),
            MetricLine::Divergence(d) => metrics.divergence = Some(d),
        }
    }
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPoint {
    pub step: u64,
    pub accuracy: f64,
    pub per_class: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracies {
    pub run_id: String,
    pub latest: Option<AccuracyPoint>,
    pub history: Vec<AccuracyPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCountsView {
    pub run_id: String,
    /// Step of the evaluation the counts were captured at.
    pub step: Option<u64>,
    pub all: Vec<f64>,
    pub confident: Vec<f64>,
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelView {
    pub index: usize,
    pub label: usize,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelPage {
    pub run_id: String,
    /// Records in the whole dump.
    pub total: usize,
    pub records: Vec<PseudoLabelView>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Best,
    Final,
}

impl CheckpointKind {
    fn file_name(self) -> &'static str {
        match self {
            CheckpointKind::Best => "best.ckpt",
            CheckpointKind::Final => "final.ckpt",
        }
    }
}

/// Applies `overrides` (a JSON object) on top of `base`. Nested objects are
/// merged, except tagged variants (objects with a `mode` key), which are
/// replaced whole. Unknown keys are rejected.
pub fn merge_config(base: &RunConfig, overrides: &Value) -> Result<RunConfig> {
    let mut value = serde_json::to_value(base).map_err(|e| AppError::Format(e.to_string()))?;
    match overrides {
        Value::Null => {}
        Value::Object(_) => merge_value(&mut value, overrides, "")?,
        _ => return Err(AppError::Invalid("config overrides must be a JSON object".into())),
    }
    Ok(serde_json::from_value(value)?)
}

fn merge_value(base: &mut Value, over: &Value, path: &str) -> Result<()> {
    let (Value::Object(b), Value::Object(o)) = (&mut *base, over) else {
        *base = over.clone();
        return Ok(());
    };
    if o.contains_key("mode") {
        *base = over.clone();
        return Ok(());
    }
    for (k, v) in o {
        let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        let Some(slot) = b.get_mut(k) else {
            return Err(AppError::Invalid(format!("unknown config key {key}")));
        };
        merge_value(slot, v, &key)?;
    }
    Ok(())
}

/// Resolves a run request: defaults, then an optional preset, then overrides.
pub fn resolve_config(preset: Option<&str>, overrides: &Value) -> Result<RunConfig> {
    let mut base = RunConfig::default();
    if let Some(p) = preset {
        base = base.with_preset(p)?;
    }
    merge_config(&base, overrides)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainRequest {
    pub k_per_class: usize,
    /// Preset for the child run; `source` keeps the source run's settings.
    #[serde(default = "default_selftrain_preset")]
    pub preset: String,
    #[serde(default)]
    pub overrides: Value,
}

fn default_selftrain_preset() -> String {
    DEFAULT_SELFTRAIN_PRESET.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainLaunch {
    pub run_id: String,
    pub plan: SelfTrainPlan,
}

struct Snapshot {
    summary: RunSummary,
    metrics: RunMetrics,
}

struct RunHandle {
    dir: PathBuf,
    stop: AtomicBool,
    snapshot: RwLock<Snapshot>,
    worker: Mutex<Option<JoinHandle<()>>>,
    /// Serializes self-training launches from this run.
    launches: Mutex<()>,
}

impl RunHandle {
    fn read<R>(&self, f: impl FnOnce(&Snapshot) -> R) -> R {
        f(&self.snapshot.read().unwrap_or_else(|e| e.into_inner()))
    }

    fn write<R>(&self, f: impl FnOnce(&mut Snapshot) -> R) -> R {
        f(&mut self.snapshot.write().unwrap_or_else(|e| e.into_inner()))
    }

    fn summary(&self) -> RunSummary {
        self.read(|s| s.summary.clone())
    }

    fn persist_summary(&self) -> Result<()> {
        write_json(&self.dir.join("summary.json"), &self.summary())
    }
}

struct DatasetEntry {
    source: DatasetSource,
    loaded: Mutex<Option<Arc<Dataset>>>,
}

#[derive(Default)]
struct State {
    datasets: BTreeMap<String, Arc<DatasetEntry>>,
    protosets: PrototypeRegistry,
    runs: BTreeMap<String, Arc<RunHandle>>,
}

/// Owns the run root: datasets, prototype sets and runs.
pub struct Engine {
    root: PathBuf,
    state: Mutex<State>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    out.sort();
    Ok(out)
}

impl Engine {
    /// Opens (creating if needed) a run root. Runs that were still pending
    /// or running when their process exited are marked failed.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["datasets", "protosets", "runs"] {
            std::fs::create_dir_all(root.join(sub))?;
        }
        let mut state = State::default();
        for path in json_files(&root.join("datasets"))? {
            let rec: DatasetRecord = read_json(&path)?;
            state.datasets.insert(rec.id, Arc::new(DatasetEntry { source: rec.source, loaded: Mutex::new(None) }));
        }
        for path in json_files(&root.join("protosets"))? {
            state.protosets.insert(read_json(&path)?)?;
        }
        let mut run_dirs: Vec<PathBuf> =
            std::fs::read_dir(root.join("runs"))?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
        run_dirs.sort();
        for dir in run_dirs {
            let summary_path = dir.join("summary.json");
            if !summary_path.is_file() {
                continue;
            }
            let mut summary: RunSummary = read_json(&summary_path)?;
            let metrics_path = dir.join("metrics.jsonl");
            let metrics = if metrics_path.is_file() { read_metrics(&metrics_path)? } else { RunMetrics::default() };
            let interrupted = !summary.state.is_terminal();
            if interrupted {
                summary.state = RunState::Failed;
                summary.error = Some("interrupted before finishing".into());
            }
            let handle = Arc::new(RunHandle {
                dir,
                stop: AtomicBool::new(false),
                snapshot: RwLock::new(Snapshot { summary, metrics }),
                worker: Mutex::new(None),
                launches: Mutex::new(()),
            });
            if interrupted {
                handle.persist_summary()?;
            }
            let id = handle.summary().run_id;
            state.runs.insert(id, handle);
        }
        Ok(Self { root, state: Mutex::new(state) })
    }

    /// Opens the root named by `BOSS_RUN_ROOT`, or `./boss-runs`.
    pub fn from_env() -> Result<Self> {
        Self::open(std::env::var_os(ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT)))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> Result<PathBuf> {
        Ok(self.handle(run_id)?.dir.clone())
    }

    // ---- datasets ----

    pub fn create_synthetic(&self, spec: SyntheticSpec) -> Result<DatasetInfo> {
        spec.validate()?;
        let mut id = spec.dataset_id();
        // the readable id omits the test fraction and per-class difficulty
        let plain = SyntheticSpec::default();
        if spec.test_fraction != plain.test_fraction || !spec.class_difficulty.is_empty() {
            id = format!("{id}-x{:016x}", stable_hash(&serde_json::to_string(&spec).unwrap_or_default()));
        }
        self.register_dataset(id, DatasetSource::Synthetic { spec })
    }

    pub fn ingest_cifar10(&self, train: Vec<PathBuf>, test: Vec<PathBuf>, test_fraction: f64, seed: u64) -> Result<DatasetInfo> {
        if train.is_empty() {
            return Err(AppError::Invalid("at least one train batch file is required".into()));
        }
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(AppError::Invalid("test fraction must be in [0, 1)".into()));
        }
        let source = DatasetSource::Cifar10 { train, test, test_fraction, seed };
        let id = format!("cifar10-{:016x}", stable_hash(&serde_json::to_string(&source).unwrap_or_default()));
        self.register_dataset(id, source)
    }

    fn register_dataset(&self, id: String, source: DatasetSource) -> Result<DatasetInfo> {
        let existing = lock(&self.state).datasets.get(&id).cloned();
        if let Some(entry) = existing {
            return self.info(&id, &*self.load(&id, &entry)?, &entry.source);
        }
        let dataset = Arc::new(source.build(&id)?);
        write_json(&self.root.join("datasets").join(format!("{id}.json")), &DatasetRecord { id: id.clone(), source: source.clone() })?;
        let entry = Arc::new(DatasetEntry { source: source.clone(), loaded: Mutex::new(Some(dataset.clone())) });
        lock(&self.state).datasets.insert(id.clone(), entry);
        self.info(&id, &dataset, &source)
    }

    fn info(&self, id: &str, ds: &Dataset, source: &DatasetSource) -> Result<DatasetInfo> {
        Ok(DatasetInfo {
            dataset_id: id.to_string(),
            num_classes: ds.num_classes,
            train_size: ds.train.len(),
            test_size: ds.test.len(),
            image_shape: ds.image_shape(),
            source: source.clone(),
        })
    }

    fn load(&self, id: &str, entry: &DatasetEntry) -> Result<Arc<Dataset>> {
        let mut slot = lock(&entry.loaded);
        if let Some(ds) = slot.as_ref() {
            return Ok(ds.clone());
        }
        let ds = Arc::new(entry.source.build(id)?);
        *slot = Some(ds.clone());
        Ok(ds)
    }

    pub fn dataset(&self, id: &str) -> Result<Arc<Dataset>> {
        let entry = lock(&self.state).datasets.get(id).cloned().ok_or_else(|| not_found!("dataset {id}"))?;
        self.load(id, &entry)
    }

    pub fn dataset_info(&self, id: &str) -> Result<DatasetInfo> {
        let entry = lock(&self.state).datasets.get(id).cloned().ok_or_else(|| not_found!("dataset {id}"))?;
        self.info(id, &*self.load(id, &entry)?, &entry.source)
    }

    pub fn dataset_ids(&self) -> Vec<String> {
        lock(&self.state).datasets.keys().cloned().collect()
    }

    /// A page of thumbnails from the train pool (`unlabeled`) or the test
    /// split. True labels are included only when `audit` is set.
    pub fn samples(&self, id: &str, offset: usize, limit: usize, unlabeled: bool, audit: bool) -> Result<SamplePage> {
        let ds = self.dataset(id)?;
        let set = if unlabeled { &ds.train } else { &ds.test };
        let end = offset.saturating_add(limit).min(set.len());
        let [channels, height, width] = ds.image_shape();
        let samples = (offset.min(end)..end)
            .map(|i| {
                Ok(Sample {
                    index: i,
                    channels,
                    height,
                    width,
                    png_base64: base64::engine::general_purpose::STANDARD.encode(thumbnail::png(&set.image(i))?),
                    label: audit.then(|| set.labels().get(i, LabelUse::Audit)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SamplePage {
            dataset_id: id.to_string(),
            split: if unlabeled { "train" } else { "test" }.into(),
            total: set.len(),
            offset,
            samples,
        })
    }

    // ---- prototype sets ----

    fn persist_protoset(&self, set: &PrototypeSet) -> Result<()> {
        write_json(&self.root.join("protosets").join(format!("{}.json", set.id)), set)
    }

    pub fn create_protoset(&self, dataset_id: &str, classes: Vec<Vec<usize>>) -> Result<ProtosetView> {
        let ds = self.dataset(dataset_id).map_err(|_| boss_core::Error::Validation(format!("unknown dataset {dataset_id}")))?;
        let mut st = lock(&self.state);
        let set = PrototypeSet::from_classes(st.protosets.next_id(), &ds, classes)?;
        self.persist_protoset(&set)?;
        st.protosets.insert(set.clone())?;
        let lineage = st.protosets.lineage(set.id);
        Ok(ProtosetView { set_id: set.id, set, lineage })
    }

    /// New set version with `class`'s prototype replaced by `index`.
    pub fn replace_prototype(&self, set_id: u32, class: usize, index: usize) -> Result<ProtosetView> {
        let dataset_id = self.protoset(set_id)?.set.dataset_id;
        let pool = self.dataset(&dataset_id)?.train.len();
        let mut st = lock(&self.state);
        let old = st.protosets.get(set_id).ok_or_else(|| not_found!("prototype set {set_id}"))?;
        let set = old.replace_prototype(st.protosets.next_id(), class, index, pool)?;
        self.persist_protoset(&set)?;
        st.protosets.insert(set.clone())?;
        let lineage = st.protosets.lineage(set.id);
        Ok(ProtosetView { set_id: set.id, set, lineage })
    }

    pub fn protoset(&self, id: u32) -> Result<ProtosetView> {
        let st = lock(&self.state);
        let set = st.protosets.get(id).cloned().ok_or_else(|| not_found!("prototype set {id}"))?;
        Ok(ProtosetView { set_id: id, set, lineage: st.protosets.lineage(id) })
    }

    pub fn protosets(&self) -> Vec<PrototypeSet> {
        lock(&self.state).protosets.sets().to_vec()
    }

    // ---- runs ----

    fn handle(&self, run_id: &str) -> Result<Arc<RunHandle>> {
        lock(&self.state).runs.get(run_id).cloned().ok_or_else(|| not_found!("run {run_id}"))
    }

    /// Validates `config` and starts training in a background thread.
    pub fn start_run(&self, config: RunConfig) -> Result<String> {
        self.launch(config, None, None)
    }

    fn launch(&self, config: RunConfig, source_run: Option<String>, plan: Option<&SelfTrainPlan>) -> Result<String> {
        config.validate()?;
        let ds = self
            .dataset(&config.dataset_id)
            .map_err(|_| boss_core::Error::Validation(format!("unknown dataset {}", config.dataset_id)))?;
        let (protos, prototype_lineage) = {
            let st = lock(&self.state);
            let set = st.protosets.get(config.prototype_set_id).cloned().ok_or_else(|| {
                boss_core::Error::Validation(format!("unknown prototype set {}", config.prototype_set_id))
            })?;
            (set, st.protosets.lineage(config.prototype_set_id))
        };
        if protos.dataset_id != config.dataset_id {
            return Err(boss_core::Error::Validation(format!(
                "prototype set {} belongs to dataset {}",
                protos.id, protos.dataset_id
            ))
            .into());
        }
        protos.validate(ds.num_classes, ds.train.len())?;
        if config.unlabeled_batch() > ds.train.len() {
            return Err(boss_core::Error::Config(format!(
                "unlabeled batch {} exceeds pool of {}",
                config.unlabeled_batch(),
                ds.train.len()
            ))
            .into());
        }

        let mut st = lock(&self.state);
        let mut n = st.runs.len() + 1;
        let run_id = loop {
            let id = format!("run-{n:04}");
            if !st.runs.contains_key(&id) && !self.root.join("runs").join(&id).exists() {
                break id;
            }
            n += 1;
        };
        let dir = self.root.join("runs").join(&run_id);
        std::fs::create_dir_all(dir.join("checkpoints"))?;
        write_json(&dir.join("config.json"), &config)?;
        if let Some(plan) = plan {
            write_json(&dir.join("plan.json"), plan)?;
        }
        let summary = RunSummary {
            run_id: run_id.clone(),
            state: RunState::Pending,
            stopped: false,
            total_steps: config.total_steps(),
            config,
            latest_step: None,
            latest_eval: None,
            best_accuracy: None,
            diagnosis: None,
            divergence: None,
            lineage: Lineage { source_run, prototype_set_id: protos.id, prototype_lineage },
            purity: plan.and_then(|p| p.purity),
            error: None,
        };
        let handle = Arc::new(RunHandle {
            dir,
            stop: AtomicBool::new(false),
            snapshot: RwLock::new(Snapshot { summary, metrics: RunMetrics::default() }),
            worker: Mutex::new(None),
            launches: Mutex::new(()),
        });
        handle.persist_summary()?;
        st.runs.insert(run_id.clone(), handle.clone());
        drop(st);

        let worker = handle.clone();
        let thread = std::thread::Builder::new().name(format!("train-{run_id}")).spawn(move || {
            let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| execute(&worker, &ds, &protos)));
            let error = match result {
                Ok(Ok(())) => None,
                Ok(Err(e)) => Some(e.to_string()),
                Err(_) => Some("training thread panicked".to_string()),
            };
            if let Some(error) = error {
                tracing::error!(run = %worker.summary().run_id, %error, "run failed");
                worker.write(|s| {
                    s.summary.state = RunState::Failed;
                    s.summary.error = Some(error);
                });
                let _ = worker.persist_summary();
            }
        })?;
        *lock(&handle.worker) = Some(thread);
        Ok(run_id)
    }

    pub fn run_ids(&self) -> Vec<String> {
        lock(&self.state).runs.keys().cloned().collect()
    }

    pub fn summary(&self, run_id: &str) -> Result<RunSummary> {
        Ok(self.handle(run_id)?.summary())
    }

    /// Blocks until the run's training thread has finished.
    pub fn wait(&self, run_id: &str) -> Result<RunSummary> {
        let handle = self.handle(run_id)?;
        let mut worker = lock(&handle.worker);
        if let Some(t) = worker.take() {
            let _ = t.join();
        }
        drop(worker);
        Ok(handle.summary())
    }

    /// Asks the run to stop and waits for it to reach a terminal state.
    /// Stopping a finished run returns its state unchanged.
    pub fn stop(&self, run_id: &str) -> Result<RunSummary> {
        let handle = self.handle(run_id)?;
        handle.stop.store(true, Ordering::SeqCst);
        self.wait(run_id)
    }

    pub fn metrics(&self, run_id: &str) -> Result<RunMetrics> {
        Ok(self.handle(run_id)?.read(|s| s.metrics.clone()))
    }

    /// Metric lines at or after `since`.
    pub fn metric_lines(&self, run_id: &str, since: u64) -> Result<Vec<MetricLine>> {
        let handle = self.handle(run_id)?;
        let lines = handle.read(|s| metric_lines(&s.metrics));
        Ok(lines.into_iter().filter(|l| l.step() >= since).collect())
    }

    pub fn class_accuracies(&self, run_id: &str) -> Result<ClassAccuracies> {
        let history: Vec<AccuracyPoint> = self.handle(run_id)?.read(|s| {
            s.metrics
                .evals
                .iter()
                .map(|e| AccuracyPoint { step: e.step, accuracy: e.accuracy, per_class: e.per_class.clone() })
                .collect()
        });
        Ok(ClassAccuracies { run_id: run_id.to_string(), latest: history.last().cloned(), history })
    }

    pub fn class_counts(&self, run_id: &str) -> Result<ClassCountsView> {
        let last = self.handle(run_id)?.read(|s| s.metrics.evals.last().cloned());
        Ok(match last {
            Some(e) => ClassCountsView {
                run_id: run_id.to_string(),
                step: Some(e.step),
                all: e.counts.all,
                confident: e.counts.confident,
                thresholds: e.counts.thresholds,
            },
            None => ClassCountsView {
                run_id: run_id.to_string(),
                step: None,
                all: Vec::new(),
                confident: Vec::new(),
                thresholds: Vec::new(),
            },
        })
    }

    pub fn diagnosis(&self, run_id: &str) -> Result<Diagnosis> {
        Ok(self.handle(run_id)?.read(|s| diagnose(&s.metrics)))
    }

    pub fn dump_dir(&self, run_id: &str) -> Result<PathBuf> {
        Ok(self.run_dir(run_id)?.join("dump"))
    }

    /// Dump records, optionally filtered to one pseudo-label class and cut
    /// to the first `top`. True labels are withheld unless `audit` is set.
    pub fn pseudo_labels(&self, run_id: &str, top: Option<usize>, class: Option<usize>, audit: bool) -> Result<PseudoLabelPage> {
        let records = dump::read(&self.dump_dir(run_id)?)?;
        let total = records.len();
        let records = records
            .into_iter()
            .filter(|r| class.is_none_or(|c| r.label == c))
            .take(top.unwrap_or(usize::MAX))
            .map(|r| PseudoLabelView {
                index: r.index,
                label: r.label,
                confidence: r.confidence,
                true_label: if audit { r.true_label } else { None },
            })
            .collect();
        Ok(PseudoLabelPage { run_id: run_id.to_string(), total, records })
    }

    /// The run's model restored from one of its checkpoints.
    pub fn model(&self, run_id: &str, which: CheckpointKind) -> Result<Classifier<f64>> {
        let summary = self.summary(run_id)?;
        let ds = self.dataset(&summary.config.dataset_id)?;
        let path = self.run_dir(run_id)?.join("checkpoints").join(which.file_name());
        if !path.is_file() {
            return Err(boss_core::Error::Sequencing(format!("run {run_id} has no {} checkpoint", which.file_name())).into());
        }
        let mut model = Classifier::standard_with_widths(ds.image_shape(), ds.num_classes, summary.config.widths)?;
        checkpoint::restore(&mut model, &checkpoint::load(&path)?)?;
        Ok(model)
    }

    pub fn evaluate(&self, run_id: &str, which: CheckpointKind) -> Result<Evaluation> {
        let model = self.model(run_id, which)?;
        let ds = self.dataset(&self.summary(run_id)?.config.dataset_id)?;
        Ok(trainer::evaluate(&model, &ds.test, ds.num_classes)?)
    }

    /// Re-runs pool inference from a checkpoint and writes the dump to `out`
    /// (the run's own dump directory by default). Returns the record count.
    pub fn redump(&self, run_id: &str, which: CheckpointKind, out: Option<&Path>) -> Result<usize> {
        let model = self.model(run_id, which)?;
        let ds = self.dataset(&self.summary(run_id)?.config.dataset_id)?;
        let records = trainer::infer_pseudo_labels(&model, &ds.train)?;
        let dir = match out {
            Some(d) => d.to_path_buf(),
            None => self.dump_dir(run_id)?,
        };
        dump::write(&dir, &records)?;
        Ok(records.len())
    }

    /// Promotes the top `k` pseudo-labels per class of a completed run and
    /// launches a child run on the enlarged labeled set.
    pub fn self_train(&self, source: &str, req: &SelfTrainRequest) -> Result<SelfTrainLaunch> {
        let handle = self.handle(source)?;
        let _serial = lock(&handle.launches);
        let summary = handle.summary();
        if summary.state != RunState::Completed {
            return Err(AppError::Conflict(format!("run {source} is {:?}, not completed", summary.state)));
        }
        if req.k_per_class == 0 {
            return Err(AppError::Invalid("k_per_class must be at least 1".into()));
        }
        let records = dump::read(&handle.dir.join("dump"))?;
        let base = self.protoset(summary.config.prototype_set_id)?.set;
        let ds = self.dataset(&summary.config.dataset_id)?;
        let selection = selftrain::select_top_k(&records, req.k_per_class, &base)?;
        let labeled_set = {
            let mut st = lock(&self.state);
            let set = selftrain::assemble_labeled_set(&base, &selection, st.protosets.next_id())?;
            set.validate(ds.num_classes, ds.train.len())?;
            self.persist_protoset(&set)?;
            st.protosets.insert(set.clone())?;
            set
        };
        let purity = selftrain::purity(&selection, ds.train.labels());
        let mut config = summary.config.clone();
        if req.preset != KEEP_SOURCE_PRESET {
            config = config.with_preset(&req.preset)?;
        }
        config = merge_config(&config, &req.overrides)?;
        config.prototype_set_id = labeled_set.id;
        let plan = SelfTrainPlan { source_run: source.to_string(), k_per_class: req.k_per_class, labeled_set, selection, purity };
        let run_id = self.launch(config, Some(source.to_string()), Some(&plan))?;
        Ok(SelfTrainLaunch { run_id, plan })
    }
}

fn stable_hash(s: &str) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    s.hash(&mut h);
    h.finish()
}

/// Streams metrics to disk and the snapshot, and saves best checkpoints.
struct RunObserver<'a> {
    handle: &'a RunHandle,
    metrics: BufWriter<File>,
    error: Option<AppError>,
}

impl RunObserver<'_> {
    fn line(&mut self, line: &MetricLine) {
        if self.error.is_some() {
            return;
        }
        let res = serde_json::to_writer(&mut self.metrics, line)
            .map_err(std::io::Error::from)
            .and_then(|_| self.metrics.write_all(b"\n"))
            .and_then(|_| self.metrics.flush());
        if let Err(e) = res {
            self.error = Some(e.into());
        }
    }
}

impl TrainObserver for RunObserver<'_> {
    fn on_step(&mut self, record: &StepRecord) {
        self.line(&MetricLine::Step(record.clone()));
        self.handle.write(|s| {
            s.metrics.steps.push(record.clone());
            s.summary.latest_step = Some(record.clone());
        });
    }

    fn on_eval(&mut self, record: &EvalRecord, model: &Classifier<f64>, is_best: bool) {
        self.line(&MetricLine::Eval(record.clone()));
        if is_best && self.error.is_none() {
            if let Err(e) = checkpoint::save(&self.handle.dir.join("checkpoints").join("best.ckpt"), model) {
                self.error = Some(e);
            }
        }
        self.handle.write(|s| {
            s.metrics.evals.push(record.clone());
            s.summary.latest_eval = Some(record.clone());
            s.summary.best_accuracy = s.metrics.best_accuracy();
        });
    }

    fn should_stop(&mut self) -> bool {
        self.error.is_some() || self.handle.stop.load(Ordering::SeqCst)
    }
}

fn execute(handle: &RunHandle, ds: &Dataset, protos: &PrototypeSet) -> Result<()> {
    let config = handle.write(|s| {
        s.summary.state = RunState::Running;
        s.summary.config.clone()
    });
    handle.persist_summary()?;
    let file = File::create(handle.dir.join("metrics.jsonl"))?;
    let mut observer = RunObserver { handle, metrics: BufWriter::new(file), error: None };
    let outcome = trainer::train(config, ds, protos, &mut observer)?;
    if let Some(d) = &outcome.metrics.divergence {
        observer.line(&MetricLine::Divergence(d.clone()));
    }
    if let Some(e) = observer.error.take() {
        return Err(e);
    }
    checkpoint::save(&handle.dir.join("checkpoints").join("final.ckpt"), &outcome.final_model)?;
    let diverged = outcome.status == RunStatus::Diverged || outcome.metrics.divergence.is_some();
    if !diverged {
        dump::write(&handle.dir.join("dump"), &trainer::infer_pseudo_labels(&outcome.final_model, &ds.train)?)?;
    }
    handle.write(|s| {
        s.summary.state = if diverged { RunState::Diverged } else { RunState::Completed };
        s.summary.stopped = outcome.status == RunStatus::Stopped;
        s.summary.divergence = outcome.metrics.divergence.clone();
        s.summary.best_accuracy = outcome.metrics.best_accuracy();
        s.summary.diagnosis = Some(diagnose(&outcome.metrics));
    });
    handle.persist_summary()
}
