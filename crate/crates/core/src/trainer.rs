//! The training loop.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentKind, AugmentPolicy};
use crate::balance::{balance_plan, BalanceConfig, BalancePlan, ClassCounts, CountMode};
use crate::data::{Dataset, ImageSet, LabelUse, PrototypeSet};
use crate::error::{bail, Error, Result};
use crate::metrics::{CountSnapshot, DivergenceEvent, EvalRecord, RunMetrics, StepRecord};
use crate::nn::Classifier;
use crate::optim::Sgd;
use crate::rng::{self, AugKey, Rng};
use crate::selftrain::{sort_records, PseudoLabelRecord};
use crate::ssl::{pseudo_label, softmax, supervised_loss, total_loss, PseudoBatch};
use crate::tensor::{Scalar, Tensor};

const INFERENCE_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset_id: String,
    pub prototype_set_id: u32,
    pub balance: BalanceConfig,
    /// Labeled batch size B.
    pub batch_size: usize,
    /// Unlabeled-to-labeled ratio r_u; the unlabeled batch is `r_u * B`.
    pub unlabeled_ratio: usize,
    /// Training budget in thousands (×1024) of images.
    pub total_kimg: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Steps between evaluations; 0 picks K/20.
    pub eval_interval: u64,
    pub precision: Precision,
    pub count_mode: CountMode,
    /// Steps during which every method runs unbalanced; `None` means one
    /// pass over the unlabeled pool.
    pub warmup_steps: Option<u64>,
    pub weak: AugmentPolicy,
    pub strong: AugmentPolicy,
    /// Channel widths of the two conv layers and the hidden linear layer.
    pub widths: [usize; 3],
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_id: String::new(),
            prototype_set_id: 0,
            balance: BalanceConfig::default(),
            batch_size: 30,
            unlabeled_ratio: 9,
            total_kimg: 64.0,
            lr: 0.06,
            momentum: 0.88,
            weight_decay: 8e-4,
            seed: 0,
            eval_interval: 0,
            precision: Precision::F64,
            count_mode: CountMode::default(),
            warmup_steps: None,
            weak: AugmentPolicy::weak(),
            strong: AugmentPolicy::strong(),
            widths: [32, 64, 128],
        }
    }
}

impl RunConfig {
    pub fn unlabeled_batch(&self) -> usize {
        self.unlabeled_ratio * self.batch_size
    }

    /// `ceil(total_kimg * 1024 / (B + μ))`.
    pub fn total_steps(&self) -> u64 {
        let per_step = (self.batch_size + self.unlabeled_batch()) as f64;
        libm::ceil(self.total_kimg * 1024.0 / per_step) as u64
    }

    pub fn resolved_eval_interval(&self) -> u64 {
        if self.eval_interval > 0 {
            self.eval_interval
        } else {
            (self.total_steps() / 20).max(1)
        }
    }

    /// Applies a named preset's hyper-parameters.
    pub fn with_preset(mut self, name: &str) -> Result<Self> {
        let p = crate::presets::preset(name)?;
        self.balance = p.balance;
        self.weight_decay = p.weight_decay;
        self.lr = p.lr;
        self.batch_size = p.batch_size;
        self.momentum = p.momentum;
        self.unlabeled_ratio = p.unlabeled_ratio;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.balance.validate()?;
        if self.batch_size == 0 {
            bail!(Config, "batch size must be positive");
        }
        if self.unlabeled_batch() == 0 {
            bail!(Config, "unlabeled batch r_u * B must be at least 1");
        }
        if !(self.total_kimg > 0.0) {
            bail!(Config, "training budget must be positive");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            bail!(Config, "invalid optimizer settings");
        }
        if self.weak.kind != AugmentKind::Weak || self.strong.kind != AugmentKind::Strong {
            bail!(Config, "weak/strong policies have the wrong kind");
        }
        self.weak.validate()?;
        self.strong.validate()?;
        Ok(())
    }
}

/// Labeled rows as `(pool index, class)` and unlabeled pool indices.
pub type BatchIndices = (Vec<(usize, usize)>, Vec<usize>);

/// Draws one step's batches. The labeled batch cycles through classes
/// round-robin from a random starting class and picks a random member of
/// each class, so a one-shot set with `B = kN` repeats every prototype
/// exactly `k` times. The unlabeled batch is `μ` distinct pool indices.
pub fn compose_batches(rng: &mut Rng, labeled: &PrototypeSet, pool_size: usize, batch_size: usize, mu: usize) -> Result<BatchIndices> {
    if pool_size == 0 {
        bail!(Config, "empty unlabeled pool");
    }
    if mu > pool_size {
        bail!(Config, "unlabeled batch {} exceeds pool of {}", mu, pool_size);
    }
    let n = labeled.num_classes();
    if n == 0 || labeled.classes.iter().any(Vec::is_empty) {
        bail!(Validation, "labeled set must cover every class");
    }
    let start = rng.random_range(0..n);
    let lab = (0..batch_size)
        .map(|i| {
            let class = (start + i) % n;
            let members = &labeled.classes[class];
            (members[rng.random_range(0..members.len())], class)
        })
        .collect();
    let unl = rand::seq::index::sample(rng, pool_size, mu).into_vec();
    Ok((lab, unl))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
}

/// Predicted class of every image, in chunks.
pub fn predict_classes<T: Scalar>(model: &Classifier<T>, set: &ImageSet) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::with_capacity(set.len());
    let mut start = 0;
    while start < set.len() {
        let end = (start + INFERENCE_CHUNK).min(set.len());
        let idx: Vec<usize> = (start..end).collect();
        let logits = model.predict(&set.gather(&idx)?.cast())?.cast::<f64>();
        for r in 0..logits.rows() {
            let p = softmax(logits.row(r));
            let (mut best, mut conf) = (0, p[0]);
            for (c, &v) in p.iter().enumerate() {
                if v > conf {
                    best = c;
                    conf = v;
                }
            }
            out.push((best, conf));
        }
        start = end;
    }
    Ok(out)
}

/// Overall and per-class accuracy on `test`; per-class is
/// `correct_n / total_n` (0 for classes absent from the test set).
pub fn evaluate<T: Scalar>(model: &Classifier<T>, test: &ImageSet, num_classes: usize) -> Result<Evaluation> {
    if test.is_empty() {
        bail!(Data, "empty test split");
    }
    let preds = predict_classes(model, test)?;
    let mut correct = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    for (i, &(p, _)) in preds.iter().enumerate() {
        let y = test.labels().get(i, LabelUse::Evaluation);
        total[y] += 1;
        correct[y] += (p == y) as usize;
    }
    let per_class = correct.iter().zip(&total).map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 }).collect();
    let accuracy = correct.iter().sum::<usize>() as f64 / preds.len() as f64;
    Ok(Evaluation { accuracy, per_class })
}

/// Predictions for the whole unlabeled pool in dump order. The true label
/// of each record is filled in through an audit read.
pub fn infer_pseudo_labels<T: Scalar>(model: &Classifier<T>, pool: &ImageSet) -> Result<Vec<PseudoLabelRecord>> {
    let preds = predict_classes(model, pool)?;
    let mut records: Vec<PseudoLabelRecord> = preds
        .into_iter()
        .enumerate()
        .map(|(index, (label, confidence))| PseudoLabelRecord {
            index,
            label,
            confidence,
            true_label: Some(pool.labels().get(index, LabelUse::Audit)),
        })
        .collect();
    sort_records(&mut records);
    Ok(records)
}

/// Hooks into a running training loop.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) {}
    fn on_eval(&mut self, _record: &EvalRecord, _model: &Classifier<f64>, _is_best: bool) {}
    fn should_stop(&mut self) -> bool {
        false
    }
}

impl TrainObserver for () {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged,
    Stopped,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub status: RunStatus,
    pub metrics: RunMetrics,
    pub final_model: Classifier<f64>,
    pub best_model: Option<Classifier<f64>>,
    pub total_steps: u64,
}

impl TrainOutcome {
    pub fn best_accuracy(&self) -> Option<f64> {
        self.metrics.best_accuracy()
    }
}

/// Views and indices of one step's batches.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub labeled_indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub unlabeled_indices: Vec<usize>,
    pub labeled_weak: Tensor,
    pub unlabeled_weak: Tensor,
    pub unlabeled_strong: Tensor,
}

pub struct Trainer<'a, T: Scalar = f64> {
    config: RunConfig,
    dataset: &'a Dataset,
    labeled: &'a PrototypeSet,
    model: Classifier<T>,
    opt: Sgd<T>,
    counts: ClassCounts,
    weak: AugmentPolicy,
    strong: AugmentPolicy,
    step: u64,
    total: u64,
    warmup: u64,
    epoch_len: u64,
    metrics: RunMetrics,
    best: Option<Classifier<f64>>,
    running_max: f64,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(config: RunConfig, dataset: &'a Dataset, labeled: &'a PrototypeSet) -> Result<Self> {
        config.validate()?;
        let pool = dataset.train.len();
        labeled.validate(dataset.num_classes, pool)?;
        let mu = config.unlabeled_batch();
        if mu > pool {
            bail!(Config, "unlabeled batch {} exceeds pool of {}", mu, pool);
        }
        let mut model = Classifier::standard_with_widths(dataset.image_shape(), dataset.num_classes, config.widths)?;
        model.init_he(config.seed);
        let total = config.total_steps();
        let opt = Sgd::new(&model, config.lr, config.momentum, config.weight_decay, total)?;
        let counts = ClassCounts::new(dataset.num_classes, pool, config.count_mode)?;
        let epoch_len = pool.div_ceil(mu) as u64;
        let mut strong = config.strong.clone();
        strong.cutout_fill = dataset.channel_mean.clone();
        Ok(Self {
            warmup: config.warmup_steps.unwrap_or(epoch_len),
            weak: config.weak.clone(),
            strong,
            config,
            dataset,
            labeled,
            model,
            opt,
            counts,
            step: 0,
            total,
            epoch_len,
            metrics: RunMetrics::default(),
            best: None,
            running_max: 0.0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &Classifier<T> {
        &self.model
    }

    /// Replaces the model (e.g. to resume from a checkpoint or to freeze a
    /// known state in tests). The optimizer velocity is kept.
    pub fn set_model(&mut self, model: Classifier<T>) -> Result<()> {
        if model.input_shape() != self.model.input_shape() || model.num_parameters() != self.model.num_parameters() {
            bail!(Dimension, "replacement model has a different architecture");
        }
        self.model = model;
        Ok(())
    }

    pub fn counts(&self) -> &ClassCounts {
        &self.counts
    }

    pub fn counts_mut(&mut self) -> &mut ClassCounts {
        &mut self.counts
    }

    pub fn metrics(&self) -> &RunMetrics {
        &self.metrics
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total
    }

    pub fn epoch_len(&self) -> u64 {
        self.epoch_len
    }

    pub fn warmup_steps(&self) -> u64 {
        self.warmup
    }

    /// Balance plan in force for the next step.
    pub fn plan(&self) -> Result<BalancePlan> {
        if self.step < self.warmup || !self.counts.has_data() {
            return Ok(BalancePlan::unbalanced(self.dataset.num_classes, self.config.balance.tau));
        }
        balance_plan(&self.config.balance, &self.counts)
    }

    /// Composes and augments the batches for `step`.
    pub fn prepare_batch(&self, step: u64) -> Result<StepBatch> {
        let mut r = rng::keyed(self.config.seed, &[rng::stream::BATCH, step]);
        let (lab, unl) = compose_batches(
            &mut r,
            self.labeled,
            self.dataset.train.len(),
            self.config.batch_size,
            self.config.unlabeled_batch(),
        )?;
        let seed = self.config.seed;
        let pool = &self.dataset.train;
        let views = |indices: &mut dyn Iterator<Item = usize>, policy: &AugmentPolicy, stream: u64| -> Result<Tensor> {
            let imgs = indices
                .map(|i| augment::augment(policy, &pool.image(i), AugKey::new(seed, i as u64, step, stream)))
                .collect::<Result<Vec<_>>>()?;
            Tensor::stack(&imgs)
        };
        Ok(StepBatch {
            labeled_weak: views(&mut lab.iter().map(|&(i, _)| i), &self.weak, rng::stream::WEAK_LABELED)?,
            unlabeled_weak: views(&mut unl.iter().copied(), &self.weak, rng::stream::WEAK_UNLABELED)?,
            unlabeled_strong: views(&mut unl.iter().copied(), &self.strong, rng::stream::STRONG_UNLABELED)?,
            labeled_indices: lab.iter().map(|&(i, _)| i).collect(),
            labels: lab.iter().map(|&(_, c)| c).collect(),
            unlabeled_indices: unl,
        })
    }

    /// Pseudo-labels for a batch of weak views (inference only).
    pub fn pseudo_label(&self, unlabeled_weak: &Tensor) -> Result<PseudoBatch> {
        pseudo_label(&self.model.predict(&unlabeled_weak.cast())?.cast())
    }

    /// Full pass over the pool to restart exact counts.
    fn recount(&mut self, plan: &BalancePlan) -> Result<()> {
        let pool = &self.dataset.train;
        let mut all = Vec::with_capacity(pool.len() * self.dataset.num_classes);
        let mut start = 0;
        while start < pool.len() {
            let end = (start + INFERENCE_CHUNK).min(pool.len());
            let idx: Vec<usize> = (start..end).collect();
            let logits = self.model.predict(&pool.gather(&idx)?.cast())?.cast::<f64>();
            all.extend_from_slice(logits.data());
            start = end;
        }
        let logits = Tensor::new(vec![pool.len(), self.dataset.num_classes], all)?;
        let mut pseudo = pseudo_label(&logits)?;
        pseudo.apply_thresholds(&plan.thresholds)?;
        self.counts.reset();
        self.counts.update(&pseudo)
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<StepRecord> {
        if self.step >= self.total {
            return Err(Error::ScheduleExhausted { step: self.step, total: self.total });
        }
        if self.config.count_mode == CountMode::ExactEpoch && self.step > 0 && self.step % self.epoch_len == 0 {
            let plan = balance_plan(&self.config.balance, &self.counts)?;
            self.recount(&plan)?;
        }
        let batch = self.prepare_batch(self.step)?;
        let plan = self.plan()?;
        let mut pseudo = self.pseudo_label(&batch.unlabeled_weak)?;

        let b = batch.labels.len();
        let input = Tensor::concat_rows(&batch.labeled_weak, &batch.unlabeled_strong)?;
        let logits = self.model.forward(&input.cast())?.cast::<f64>();
        let n = logits.row_len();
        let sup_logits = Tensor::new(vec![b, n], logits.data()[..b * n].to_vec())?;
        let strong_logits = Tensor::new(vec![logits.rows() - b, n], logits.data()[b * n..].to_vec())?;

        let (ls, gs) = supervised_loss(&sup_logits, &batch.labels)?;
        let (lu, gu, z) = plan.unsupervised_loss(&strong_logits, &mut pseudo)?;
        let lambda = self.config.balance.lambda_u;
        let total = total_loss(ls, lu, lambda);
        if !total.is_finite() {
            return Err(Error::NumericDivergence(format!("loss {total} at step {}", self.step)));
        }
        let mut grad = gs.into_data();
        grad.extend(gu.data().iter().map(|&g| lambda * g));
        self.model.backward(&Tensor::new(vec![logits.rows(), n], grad)?.cast())?;
        let lr = self.opt.step(&mut self.model)?;

        if matches!(self.config.count_mode, CountMode::Ema { .. }) {
            self.counts.update(&pseudo)?;
        }
        let record = StepRecord {
            step: self.step,
            lr,
            supervised: ls,
            unsupervised: lu,
            total,
            included: pseudo.included(),
            per_class_included: pseudo.included_per_class(),
            normalizer: z,
        };
        self.step += 1;
        self.metrics.steps.push(record.clone());
        Ok(record)
    }

    /// Evaluates on the test split and records the result. Returns the
    /// record and whether it set a new best accuracy.
    pub fn evaluate(&mut self) -> Result<(EvalRecord, bool)> {
        let ev = evaluate(&self.model, &self.dataset.test, self.dataset.num_classes)?;
        let is_best = self.metrics.evals.is_empty() || ev.accuracy > self.running_max;
        self.running_max = self.running_max.max(ev.accuracy);
        let record = EvalRecord {
            step: self.step,
            accuracy: ev.accuracy,
            per_class: ev.per_class,
            running_max: self.running_max,
            counts: CountSnapshot {
                all: self.counts.all(),
                confident: self.counts.confident(),
                thresholds: self.plan()?.thresholds,
            },
        };
        self.metrics.evals.push(record.clone());
        Ok((record, is_best))
    }

    /// Runs to the end of the schedule. Numeric divergence ends the run with
    /// status [`RunStatus::Diverged`] and keeps the metrics gathered so far.
    pub fn run(mut self, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
        let interval = self.config.resolved_eval_interval();
        let mut status = RunStatus::Completed;
        while self.step < self.total {
            if observer.should_stop() {
                status = RunStatus::Stopped;
                break;
            }
            match self.step() {
                Ok(rec) => observer.on_step(&rec),
                Err(Error::NumericDivergence(message)) => {
                    self.metrics.divergence = Some(DivergenceEvent { step: self.step, message });
                    status = RunStatus::Diverged;
                    break;
                }
                Err(e) => return Err(e),
            }
            if self.step % interval == 0 || self.step == self.total {
                self.eval_and_notify(observer)?;
            }
        }
        if status == RunStatus::Stopped && self.metrics.evals.last().map(|e| e.step) != Some(self.step) {
            self.eval_and_notify(observer)?;
        }
        Ok(TrainOutcome {
            status,
            final_model: self.model.cast(),
            best_model: self.best,
            metrics: self.metrics,
            total_steps: self.total,
        })
    }

    fn eval_and_notify(&mut self, observer: &mut dyn TrainObserver) -> Result<()> {
        match self.evaluate() {
            Ok((rec, is_best)) => {
                let model = self.model.cast::<f64>();
                observer.on_eval(&rec, &model, is_best);
                if is_best {
                    self.best = Some(model);
                }
                Ok(())
            }
            Err(Error::NumericDivergence(m)) => {
                self.metrics.divergence = Some(DivergenceEvent { step: self.step, message: m.to_string() });
                Ok(())
            }
            Err(e) => Err(e),
        }
    }
}

/// Trains in the configured precision.
pub fn train(config: RunConfig, dataset: &Dataset, labeled: &PrototypeSet, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    match config.precision {
        Precision::F64 => Trainer::<f64>::new(config, dataset, labeled)?.run(observer),
        Precision::F32 => Trainer::<f32>::new(config, dataset, labeled)?.run(observer),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Provenance;

    fn set(classes: Vec<Vec<usize>>) -> PrototypeSet {
        PrototypeSet { id: 1, parent: None, dataset_id: "d".into(), classes, provenance: Provenance::Manual }
    }

    #[test]
    fn stratified_labeled_batch() {
        let s = set((0..10).map(|c| vec![100 + c]).collect());
        for seed in 0..5 {
            let (lab, unl) = compose_batches(&mut rng::keyed(seed, &[]), &s, 500, 30, 270).unwrap();
            let mut per = [0; 10];
            for (i, c) in lab {
                assert_eq!(i, 100 + c);
                per[c] += 1;
            }
            assert_eq!(per, [3; 10]);
            let mut u = unl.clone();
            u.sort_unstable();
            u.dedup();
            assert_eq!(u.len(), 270);
        }
    }

    #[test]
    fn batch_draws_reproducible() {
        let s = set(vec![vec![0, 1], vec![2]]);
        let a = compose_batches(&mut rng::keyed(3, &[]), &s, 50, 8, 16).unwrap();
        let b = compose_batches(&mut rng::keyed(3, &[]), &s, 50, 8, 16).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_unlabeled_batch() {
        let s = set(vec![vec![0], vec![1]]);
        assert!(matches!(compose_batches(&mut rng::keyed(0, &[]), &s, 10, 2, 11), Err(Error::Config(_))));
    }

    #[test]
    fn fixmatch_row_batch_sizes() {
        let c = RunConfig::default().with_preset("fixmatch").unwrap();
        assert_eq!(c.unlabeled_batch(), 448);
        assert_eq!(c.total_steps(), (64.0f64 * 1024.0 / 512.0).ceil() as u64);
    }
}
