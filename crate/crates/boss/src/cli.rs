//! The `boss` command line. Every command prints JSON (or, for `diagnose`,
//! a short report) on stdout. Exit codes: 0 success, 2 invalid input,
//! 3 diverged run, 1 anything else.

use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use boss_core::data::{pick_by_truth, pick_central};
use boss_core::diagnosis::{diagnose, Diagnosis, Direction, HyperParameter};
use boss_core::synthetic::SyntheticSpec;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{AppError, Result};
use crate::store::{self, read_metrics, resolve_config, CheckpointKind, Engine, RunState, SelfTrainRequest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "boss", version, about = "One-shot semi-supervised training with pseudo-label class balancing")]
pub struct Cli {
    /// Run root directory (defaults to $BOSS_RUN_ROOT, then ./boss-runs).
    #[arg(long, global = true)]
    pub root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

/// A JSON config file plus `key.path=value` overrides applied on top.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON file with settings for this command.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set balance.tau=0.9` (value parsed as
    /// JSON, else taken as a string). Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        difficulty: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Register CIFAR-10 binary batch files as a dataset.
    #[command(name = "ingest-cifar10")]
    IngestCifar10 {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, num_args = 1..)]
        train: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        test: Vec<PathBuf>,
        /// Held-out share of the train files when no test files are given.
        #[arg(long)]
        test_fraction: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Create, refine and list prototype sets.
    Protoset {
        #[command(subcommand)]
        action: ProtosetAction,
    },
    /// Train a run to completion.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        /// Named hyper-parameter preset, applied before the config file.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        protoset: Option<u32>,
        /// Balance method 0-4.
        #[arg(long)]
        balance: Option<u8>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        kimg: Option<f64>,
    },
    /// Evaluate a run's checkpoint on the test split.
    Eval {
        run: String,
        #[arg(long, value_enum, default_value = "best")]
        checkpoint: Ckpt,
    },
    /// Re-dump pseudo-labels from a run's checkpoint.
    Dump {
        run: String,
        #[arg(long, value_enum, default_value = "final")]
        checkpoint: Ckpt,
        /// Output directory (defaults to the run's dump directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify a run's accuracy trajectory and suggest hyper-parameter moves.
    Diagnose {
        /// Run id.
        run: Option<String>,
        /// Diagnose a metrics file instead of a run.
        #[arg(long, conflicts_with = "run")]
        metrics: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Promote the top pseudo-labels of a completed run and train again.
    SelfTrain {
        run: String,
        #[command(flatten)]
        overrides: Overrides,
        /// Promotions per class.
        #[arg(long, short)]
        k: usize,
        /// Preset for the new run; `source` keeps the source run's settings.
        #[arg(long, default_value = store::DEFAULT_SELFTRAIN_PRESET)]
        preset: String,
        /// Return after launching instead of waiting for the run.
        #[arg(long)]
        detach: bool,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

#[derive(Debug, Subcommand)]
pub enum ProtosetAction {
    /// Create a set from per-class indices, e.g. `--classes "12;40;7,9"`.
    Create {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        dataset: Option<String>,
        /// Semicolon-separated classes of comma-separated pool indices.
        #[arg(long, conflicts_with = "pick")]
        classes: Option<String>,
        /// Stand in for the labeler on data with known labels.
        #[arg(long, value_enum)]
        pick: Option<Pick>,
        #[arg(long, default_value_t = 10)]
        candidates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// New version with one class's prototype replaced.
    Replace {
        #[arg(long = "set")]
        set_id: u32,
        #[arg(long)]
        class: usize,
        #[arg(long)]
        index: usize,
    },
    List,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Pick {
    /// One of the samples closest to its class mean.
    Central,
    /// A random sample of the class.
    Random,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Ckpt {
    Best,
    Final,
}

impl From<Ckpt> for CheckpointKind {
    fn from(c: Ckpt) -> Self {
        match c {
            Ckpt::Best => CheckpointKind::Best,
            Ckpt::Final => CheckpointKind::Final,
        }
    }
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn out(text: &str) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    match stdout.write_all(text.as_bytes()).and_then(|_| stdout.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    out(&(serde_json::to_string_pretty(value).map_err(|e| AppError::Format(e.to_string()))? + "\n"))
}

fn open(root: Option<PathBuf>) -> Result<Engine> {
    match root {
        Some(r) => Engine::open(r),
        None => Engine::from_env(),
    }
}

/// Sets `path` (dot separated) in `obj`, creating objects on the way.
fn set_path(obj: &mut Map<String, Value>, path: &str, value: Value) {
    match path.split_once('.') {
        None => {
            obj.insert(path.to_string(), value);
        }
        Some((head, rest)) => {
            let slot = obj.entry(head.to_string()).or_insert_with(|| Value::Object(Map::new()));
            if !slot.is_object() {
                *slot = Value::Object(Map::new());
            }
            set_path(slot.as_object_mut().expect("object"), rest, value);
        }
    }
}

impl Overrides {
    /// The config file's object with `flags` and then `--set` pairs applied.
    pub fn resolve(&self, flags: Vec<(&str, Option<Value>)>) -> Result<Value> {
        let mut obj = match &self.config {
            Some(path) => match serde_json::from_slice(&std::fs::read(path)?)? {
                Value::Object(o) => o,
                _ => return Err(AppError::Invalid(format!("{}: expected a JSON object", path.display()))),
            },
            None => Map::new(),
        };
        for (k, v) in flags {
            if let Some(v) = v {
                set_path(&mut obj, k, v);
            }
        }
        for pair in &self.set {
            let Some((k, v)) = pair.split_once('=') else {
                return Err(AppError::Invalid(format!("--set expects KEY=VALUE, got {pair}")));
            };
            let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            set_path(&mut obj, k.trim(), v);
        }
        Ok(Value::Object(obj))
    }
}

fn opt<T: Into<Value>>(v: Option<T>) -> Option<Value> {
    v.map(Into::into)
}

fn parse_classes(s: &str) -> Result<Vec<Vec<usize>>> {
    s.split(';')
        .map(|c| {
            c.split(',')
                .map(|i| i.trim().parse::<usize>().map_err(|_| AppError::Invalid(format!("bad index {i:?} in --classes"))))
                .collect()
        })
        .collect()
}

fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData { overrides, classes, per_class, size, difficulty, seed } => {
            let value = overrides.resolve(vec![
                ("num_classes", opt(classes)),
                ("samples_per_class", opt(per_class)),
                ("image_size", opt(size)),
                ("difficulty", opt(difficulty)),
                ("seed", opt(seed)),
            ])?;
            let spec: SyntheticSpec = serde_json::from_value(value)?;
            print(&open(cli.root)?.create_synthetic(spec)?)?;
        }
        Command::IngestCifar10 { overrides, train, test, test_fraction, seed } => {
            let paths = |p: Vec<PathBuf>| (!p.is_empty()).then(|| Value::from(p.iter().map(|x| x.display().to_string()).collect::<Vec<_>>()));
            let value = overrides.resolve(vec![
                ("train", paths(train)),
                ("test", paths(test)),
                ("test_fraction", opt(test_fraction)),
                ("seed", opt(seed)),
            ])?;
            #[derive(serde::Deserialize)]
            #[serde(deny_unknown_fields)]
            struct Req {
                #[serde(default)]
                train: Vec<PathBuf>,
                #[serde(default)]
                test: Vec<PathBuf>,
                #[serde(default)]
                test_fraction: Option<f64>,
                #[serde(default)]
                seed: u64,
            }
            let req: Req = serde_json::from_value(value)?;
            print(&open(cli.root)?.ingest_cifar10(req.train, req.test, req.test_fraction.unwrap_or(0.2), req.seed)?)?;
        }
        Command::Protoset { action } => {
            let engine = open(cli.root)?;
            match action {
                ProtosetAction::Create { overrides, dataset, classes, pick, candidates, seed } => {
                    let value = overrides.resolve(vec![("dataset_id", opt(dataset))])?;
                    let dataset_id = value
                        .get("dataset_id")
                        .and_then(Value::as_str)
                        .ok_or_else(|| AppError::Invalid("a dataset id is required".into()))?
                        .to_string();
                    let classes = match (classes, pick, value.get("classes")) {
                        (Some(s), _, _) => parse_classes(&s)?,
                        (None, Some(p), _) => {
                            let ds = engine.dataset(&dataset_id)?;
                            match p {
                                Pick::Central => pick_central(&ds, candidates, seed)?,
                                Pick::Random => pick_by_truth(&ds, 1, seed)?,
                            }
                        }
                        (None, None, Some(c)) => serde_json::from_value(c.clone())?,
                        (None, None, None) => return Err(AppError::Invalid("give --classes, --pick or a config with classes".into())),
                    };
                    print(&engine.create_protoset(&dataset_id, classes)?)?;
                }
                ProtosetAction::Replace { set_id, class, index } => print(&engine.replace_prototype(set_id, class, index)?)?,
                ProtosetAction::List => print(&engine.protosets())?,
            }
        }
        Command::Train { overrides, preset, dataset, protoset, balance, seed, kimg } => {
            let value = overrides.resolve(vec![
                ("dataset_id", opt(dataset)),
                ("prototype_set_id", opt(protoset)),
                ("balance.method", opt(balance)),
                ("seed", opt(seed)),
                ("total_kimg", opt(kimg)),
            ])?;
            let config = resolve_config(preset.as_deref(), &value)?;
            let engine = open(cli.root)?;
            let id = engine.start_run(config)?;
            tracing::info!(run = %id, "training");
            let summary = engine.wait(&id)?;
            print(&summary)?;
            return Ok(exit_for(summary.state));
        }
        Command::Eval { run, checkpoint } => print(&open(cli.root)?.evaluate(&run, checkpoint.into())?)?,
        Command::Dump { run, checkpoint, out } => {
            let engine = open(cli.root)?;
            let n = engine.redump(&run, checkpoint.into(), out.as_deref())?;
            let dir = match out {
                Some(d) => d,
                None => engine.dump_dir(&run)?,
            };
            print(&serde_json::json!({ "run_id": run, "records": n, "dir": dir }))?;
        }
        Command::Diagnose { run, metrics, json } => {
            let d = match (run, metrics) {
                (_, Some(path)) => diagnose(&read_metrics(&path)?),
                (Some(run), None) => open(cli.root)?.diagnosis(&run)?,
                (None, None) => return Err(AppError::Invalid("give a run id or --metrics".into())),
            };
            if json {
                print(&d)?;
            } else {
                out(&report(&d))?;
            }
        }
        Command::SelfTrain { run, overrides, k, preset, detach } => {
            let value = overrides.resolve(Vec::new())?;
            let engine = open(cli.root)?;
            let launch = engine.self_train(&run, &SelfTrainRequest { k_per_class: k, preset, overrides: value })?;
            if detach {
                print(&launch)?;
                return Ok(EXIT_OK);
            }
            let summary = engine.wait(&launch.run_id)?;
            print(&serde_json::json!({ "plan": launch.plan, "run": summary }))?;
            return Ok(exit_for(summary.state));
        }
        Command::Serve { addr } => {
            let engine = Arc::new(open(cli.root)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::service::serve(engine, addr))?;
        }
    }
    Ok(EXIT_OK)
}

fn exit_for(state: RunState) -> i32 {
    match state {
        RunState::Completed => EXIT_OK,
        RunState::Diverged => EXIT_DIVERGED,
        _ => 1,
    }
}

fn name(target: HyperParameter) -> String {
    match target {
        HyperParameter::Delta => "delta".into(),
        HyperParameter::LambdaU => "lambda_u".into(),
        HyperParameter::WeightDecay => "weight_decay".into(),
        HyperParameter::LearningRate => "learning_rate".into(),
        HyperParameter::Tau => "tau".into(),
        HyperParameter::Prototype(c) => format!("prototype of class {c}"),
    }
}

/// Plain-text diagnosis.
pub fn report(d: &Diagnosis) -> String {
    let verdict = serde_json::to_value(d.verdict).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
    let mut out = format!(
        "verdict: {verdict}\nmax drop: {:.1} points\nplateau: {} evals\nweak classes: {:?}\n",
        d.evidence.max_drop, d.evidence.plateau_length, d.evidence.weak_classes
    );
    for s in &d.suggestions {
        let dir = match s.direction {
            Direction::Increase => "increase",
            Direction::Decrease => "decrease",
            Direction::Replace => "replace",
        };
        out.push_str(&format!("suggest: {dir} {}\n", name(s.target)));
    }
    out
}

