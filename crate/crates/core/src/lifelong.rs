//! Domain-incremental training loops.
//!
//! [`LifelongRun`] walks the domain queue one dataset at a time. The first
//! domain is fit with the count loss alone; each later domain is fit with the
//! BDF loss against a frozen snapshot of the previous best model. After every
//! step all seen test splits are scored, filling one row of the evaluation
//! matrix. [`run_joint`] is the all-data-at-once reference.

use std::collections::VecDeque;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_synth::{
    augment, load_dataset, AnnotatedImage, AugmentConfig, DomainDataset, Image,
};
use crate::density::{downsample_density, DensityMap};
use crate::error::{validation, Error, Result};
use crate::losses::LossConfig;
use crate::metrics::{mae, rmse, EvalMatrix};
use crate::model::{
    DensityRegressor, FrozenSnapshot, OptimizerConfig, OptimizerState, TrainBatch, OUTPUT_STRIDE,
};
use crate::ot::CostMatrix;

/// Share of each training split held out (from the end) for checkpoint selection.
pub const VALIDATION_FRACTION: f64 = 0.1;

/// Batch tag used by joint training, whose batches mix domains.
pub const UNION_TAG: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Flcb,
    Sequential,
    Joint,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Flcb => "flcb",
            Mode::Sequential => "sequential",
            Mode::Joint => "joint",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flcb" => Ok(Mode::Flcb),
            "sequential" => Ok(Mode::Sequential),
            "joint" => Ok(Mode::Joint),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}; expected flcb, sequential or joint"
            ))),
        }
    }
}

/// Optimization budget shared by every mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub epochs_per_domain: usize,
    pub batch_size: usize,
    pub augment: AugmentConfig,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs_per_domain: 10,
            batch_size: 8,
            augment: AugmentConfig {
                flip_prob: 0.5,
                crop_size: Some(32),
            },
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_domain == 0 {
            return Err(Error::Config("epochs_per_domain must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.augment.flip_prob) {
            return Err(Error::Config(format!(
                "flip_prob {} is outside [0, 1]",
                self.augment.flip_prob
            )));
        }
        if let Some(c) = self.augment.crop_size {
            if c == 0 || c % OUTPUT_STRIDE != 0 {
                return Err(Error::Config(format!(
                    "crop_size {c} must be a positive multiple of {OUTPUT_STRIDE}"
                )));
            }
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) || o.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "learning rate {} / weight decay {} out of range",
                o.learning_rate, o.weight_decay
            )));
        }
        Ok(())
    }
}

/// Where a queued domain comes from. Disk sources are only read when the
/// domain reaches the front of the queue.
#[derive(Debug, Clone)]
pub enum DomainSource {
    Loaded(DomainDataset),
    Disk { name: String, dir: PathBuf },
}

impl DomainSource {
    pub fn name(&self) -> &str {
        match self {
            DomainSource::Loaded(ds) => &ds.spec.name,
            DomainSource::Disk { name, .. } => name,
        }
    }

    fn load(self) -> Result<DomainDataset> {
        match self {
            DomainSource::Loaded(ds) => Ok(ds),
            DomainSource::Disk { name, dir } => {
                let ds = load_dataset(&dir)?;
                if ds.spec.name != name {
                    return Err(Error::Config(format!(
                        "{} holds domain {:?}, expected {name:?}",
                        dir.display(),
                        ds.spec.name
                    )));
                }
                Ok(ds)
            }
        }
    }
}

/// A finished domain; only its test split is kept.
#[derive(Debug, Clone)]
pub struct SeenDomain {
    pub name: String,
    pub test: Vec<AnnotatedImage>,
}

impl From<DomainDataset> for SeenDomain {
    fn from(ds: DomainDataset) -> Self {
        Self {
            name: ds.spec.name,
            test: ds.test,
        }
    }
}

/// Untrained (`Q`) and finished (`P`) domains.
#[derive(Debug)]
pub struct DomainQueues {
    pending: VecDeque<DomainSource>,
    seen: Vec<SeenDomain>,
}

impl DomainQueues {
    pub fn new(sources: Vec<DomainSource>) -> Self {
        Self {
            pending: sources.into(),
            seen: Vec::new(),
        }
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn seen(&self) -> &[SeenDomain] {
        &self.seen
    }

    pub fn total(&self) -> usize {
        self.pending.len() + self.seen.len()
    }

    fn front_name(&self) -> Option<&str> {
        self.pending.front().map(DomainSource::name)
    }

    fn pop(&mut self) -> Result<DomainDataset> {
        self.pending
            .pop_front()
            .ok_or_else(|| Error::State("no untrained domain left in the queue".into()))?
            .load()
    }

    /// Moves a finished domain into `P`, discarding its training images.
    fn push_seen(&mut self, ds: DomainDataset) {
        self.seen.push(ds.into());
    }
}

/// One optimizer step of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossLogRecord {
    pub step: usize,
    pub domain: String,
    pub epoch: usize,
    pub iteration: usize,
    pub batch_domain: usize,
    pub l1: f64,
    pub ot: f64,
    pub reg: f64,
    pub count: f64,
    pub output_term: f64,
    pub feature_term: f64,
    pub total: f64,
    pub ot_unconverged: usize,
}

/// End-of-epoch validation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub step: usize,
    pub epoch: usize,
    pub val_mae: f64,
}

/// Counters backing the time/space and isolation contracts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Instrumentation {
    /// Training epochs executed across the whole run.
    pub epochs: usize,
    /// Batches whose domain tag was checked against the active domain.
    pub replay_checks: usize,
    /// Largest number of training images held by the trainer at once.
    pub max_retained_train: usize,
    /// Steps whose teacher fingerprint was compared before and after.
    pub teacher_checks: usize,
}

/// Per-domain test scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub name: String,
    pub mae: f64,
    pub rmse: f64,
}

/// MAE/RMSE of `model` on every domain in `seen`, in order.
pub fn evaluate_seen(model: &DensityRegressor, seen: &[SeenDomain]) -> Result<Vec<DomainScore>> {
    if seen.is_empty() {
        return Err(Error::State("no seen domain to evaluate".into()));
    }
    seen.iter()
        .map(|d| {
            let (mae, rmse) = score(model, &d.test)?;
            Ok(DomainScore {
                name: d.name.clone(),
                mae,
                rmse,
            })
        })
        .collect()
}

fn score(model: &DensityRegressor, items: &[AnnotatedImage]) -> Result<(f64, f64)> {
    let images: Vec<Image> = items.iter().map(|a| a.image.clone()).collect();
    let pred = model.predict_counts(&images)?;
    let truth: Vec<f64> = items.iter().map(|a| a.count() as f64).collect();
    Ok((mae(&pred, &truth)?, rmse(&pred, &truth)?))
}

/// Splits a training split into (fit, validation) with the tail held out.
pub fn validation_split(train: &[AnnotatedImage]) -> (&[AnnotatedImage], &[AnnotatedImage]) {
    let n = train.len();
    let n_val =
        ((n as f64 * VALIDATION_FRACTION).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    if n < 2 {
        return (train, train);
    }
    train.split_at(n - n_val)
}

struct Sample<'a> {
    item: &'a AnnotatedImage,
    density: DensityMap,
    tag: usize,
}

struct FitOutcome {
    best: DensityRegressor,
    last: DensityRegressor,
}

/// Everything `fit` needs besides the samples.
struct FitContext<'a> {
    step: usize,
    domain: &'a str,
    active_tag: Option<usize>,
    teacher: Option<&'a FrozenSnapshot>,
    cfg: &'a LossConfig,
    settings: &'a TrainSettings,
}

struct Journal {
    log: Vec<LossLogRecord>,
    epochs: Vec<EpochRecord>,
    instr: Instrumentation,
    iteration: usize,
}

impl Journal {
    fn new() -> Self {
        Self {
            log: Vec::new(),
            epochs: Vec::new(),
            instr: Instrumentation::default(),
            iteration: 0,
        }
    }
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

/// Fixed-budget training with best-by-validation selection.
fn fit(
    start: DensityRegressor,
    samples: &[Sample<'_>],
    val: &[&AnnotatedImage],
    ctx: &FitContext<'_>,
    journal: &mut Journal,
) -> Result<FitOutcome> {
    let s = ctx.settings;
    let sigma = ctx.cfg.sigma;
    let mut rng = step_rng(s.seed, ctx.step);
    let mut model = start;
    let mut opt = OptimizerState::new(s.optimizer.clone());
    journal.instr.max_retained_train = journal.instr.max_retained_train.max(samples.len());

    let val_items: Vec<AnnotatedImage> = val.iter().map(|a| (*a).clone()).collect();
    let mut best = (f64::INFINITY, model.clone());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut costs: Vec<((usize, usize), CostMatrix)> = Vec::new();

    for epoch in 1..=s.epochs_per_domain {
        order.shuffle(&mut rng);
        for chunk in order.chunks(s.batch_size) {
            let mut images = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            let mut tag = None;
            for &k in chunk {
                let sample = &samples[k];
                let (cropped, dens) =
                    augment(sample.item, &sample.density, &s.augment, sigma, &mut rng)?;
                images.push(cropped.image);
                targets.push(downsample_density(&dens, OUTPUT_STRIDE)?);
                tag = match tag {
                    None => Some(sample.tag),
                    Some(t) if t == sample.tag => Some(t),
                    Some(_) => Some(UNION_TAG),
                };
            }
            let batch = TrainBatch {
                images,
                targets,
                domain: tag.unwrap_or(UNION_TAG),
            };
            if let Some(active) = ctx.active_tag {
                journal.instr.replay_checks += 1;
                if batch.domain != active {
                    return Err(Error::State(format!(
                        "replay detected: batch from domain {} while training domain {active}",
                        batch.domain
                    )));
                }
            }
            let grid = batch.targets[0].shape();
            let cost = match costs.iter().position(|(g, _)| *g == grid) {
                Some(i) => &costs[i].1,
                None => {
                    costs.push((grid, CostMatrix::new(grid)?));
                    &costs.last().unwrap().1
                }
            };
            let (b, stats) = model.train_step(&mut opt, &batch, ctx.teacher, ctx.cfg, cost)?;
            journal.iteration += 1;
            journal.log.push(LossLogRecord {
                step: ctx.step,
                domain: ctx.domain.to_string(),
                epoch,
                iteration: journal.iteration,
                batch_domain: batch.domain,
                l1: b.l1,
                ot: b.ot,
                reg: b.reg,
                count: b.count,
                output_term: b.distill_output,
                feature_term: b.distill_feature,
                total: b.total,
                ot_unconverged: stats.unconverged,
            });
        }
        journal.instr.epochs += 1;
        let (val_mae, _) = score(&model, &val_items)?;
        journal.epochs.push(EpochRecord {
            step: ctx.step,
            epoch,
            val_mae,
        });
        if val_mae < best.0 {
            best = (val_mae, model.clone());
        }
    }
    Ok(FitOutcome {
        best: best.1,
        last: model,
    })
}

fn prepare<'a>(items: &'a [AnnotatedImage], tag: usize, sigma: f64) -> Result<Vec<Sample<'a>>> {
    items
        .iter()
        .map(|item| {
            Ok(Sample {
                density: item.density(sigma)?,
                item,
                tag,
            })
        })
        .collect()
}

/// Sequential (flcb or fine-tuning) lifelong run over a queue of domains.
#[derive(Debug)]
pub struct LifelongRun {
    pub order: Vec<String>,
    pub mode: Mode,
    /// Effective loss settings; `lambda` is zero in sequential mode.
    pub cfg: LossConfig,
    pub settings: TrainSettings,
    /// Rows produced by the best-by-validation checkpoint of each step.
    pub eval: EvalMatrix,
    /// The same rows for the last-epoch model of each step.
    pub eval_final: EvalMatrix,
    /// Best checkpoint of every finished step.
    pub checkpoints: Vec<DensityRegressor>,
    pub log: Vec<LossLogRecord>,
    pub epoch_log: Vec<EpochRecord>,
    pub instr: Instrumentation,
    queues: DomainQueues,
    teacher_fingerprints: Vec<(Vec<u8>, Vec<u8>)>,
    iteration: usize,
}

impl LifelongRun {
    pub fn new(
        mode: Mode,
        cfg: LossConfig,
        settings: TrainSettings,
        sources: Vec<DomainSource>,
    ) -> Result<Self> {
        if mode == Mode::Joint {
            return Err(Error::Config(
                "joint training is not incremental; use run_joint".into(),
            ));
        }
        cfg.validate()?;
        settings.validate()?;
        if sources.is_empty() {
            return Err(Error::Config("a run needs at least one domain".into()));
        }
        let order: Vec<String> = sources.iter().map(|s| s.name().to_string()).collect();
        for (i, name) in order.iter().enumerate() {
            if order[..i].contains(name) {
                return Err(Error::Config(format!(
                    "domain {name:?} appears twice in the order"
                )));
            }
        }
        let mut cfg = cfg;
        if mode == Mode::Sequential {
            cfg.lambda_ = 0.0;
        }
        Ok(Self {
            eval: EvalMatrix::new(order.clone()),
            eval_final: EvalMatrix::new(order.clone()),
            order,
            mode,
            cfg,
            settings,
            checkpoints: Vec::new(),
            log: Vec::new(),
            epoch_log: Vec::new(),
            instr: Instrumentation::default(),
            queues: DomainQueues::new(sources),
            teacher_fingerprints: Vec::new(),
            iteration: 0,
        })
    }

    /// Number of finished steps.
    pub fn steps_done(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn queues(&self) -> &DomainQueues {
        &self.queues
    }

    /// Teacher fingerprints taken before and after each incremental step.
    pub fn teacher_fingerprints(&self) -> &[(Vec<u8>, Vec<u8>)] {
        &self.teacher_fingerprints
    }

    pub fn latest_model(&self) -> Option<&DensityRegressor> {
        self.checkpoints.last()
    }

    /// Step 1: count loss only, from a freshly initialized model.
    pub fn train_first_domain(&mut self) -> Result<()> {
        if self.steps_done() != 0 {
            return Err(Error::State("the first domain is already trained".into()));
        }
        let start = DensityRegressor::new(self.settings.seed);
        self.train_step_with(start, None)
    }

    /// Step t ≥ 2: BDF loss against the frozen best model of step t−1.
    pub fn train_incremental_domain(&mut self) -> Result<()> {
        let t = self.steps_done() + 1;
        let prev = self.checkpoints.last().cloned().ok_or_else(|| {
            Error::State("incremental step needs the checkpoint of a previous step".into())
        })?;
        let teacher = prev.snapshot(t - 1);
        let before = teacher.fingerprint();
        self.train_step_with(prev, Some(&teacher))?;
        let after = teacher.fingerprint();
        self.instr.teacher_checks += 1;
        let stable = before == after;
        self.teacher_fingerprints.push((before, after));
        if !stable {
            return Err(Error::State(format!(
                "teacher parameters changed during step {t}"
            )));
        }
        Ok(())
    }

    fn train_step_with(
        &mut self,
        start: DensityRegressor,
        teacher: Option<&FrozenSnapshot>,
    ) -> Result<()> {
        let t = self.steps_done() + 1;
        if self.queues.front_name().is_none() {
            return Err(Error::State("no untrained domain left in the queue".into()));
        }
        let ds = self.queues.pop()?;
        let name = ds.spec.name.clone();
        let (fit_items, val_items) = validation_split(&ds.train);
        let samples = prepare(fit_items, t, self.cfg.sigma)?;
        let val: Vec<&AnnotatedImage> = val_items.iter().collect();
        // The whole training split (fit + validation) is resident here.
        self.instr.max_retained_train = self.instr.max_retained_train.max(ds.train.len());

        let mut journal = Journal::new();
        journal.iteration = self.iteration;
        let ctx = FitContext {
            step: t,
            domain: &name,
            active_tag: Some(t),
            teacher,
            cfg: &self.cfg,
            settings: &self.settings,
        };
        let out = fit(start, &samples, &val, &ctx, &mut journal)?;
        drop(samples);

        self.iteration = journal.iteration;
        self.log.append(&mut journal.log);
        self.epoch_log.append(&mut journal.epochs);
        self.instr.epochs += journal.instr.epochs;
        self.instr.replay_checks += journal.instr.replay_checks;

        self.queues.push_seen(ds);
        let rows = [
            (&out.best, &mut self.eval),
            (&out.last, &mut self.eval_final),
        ];
        for (model, matrix) in rows {
            let scores = evaluate_seen(model, self.queues.seen())?;
            let mae: Vec<f64> = scores.iter().map(|s| s.mae).collect();
            let rmse: Vec<f64> = scores.iter().map(|s| s.rmse).collect();
            matrix.push_row(&mae, &rmse)?;
        }
        self.checkpoints.push(out.best);
        Ok(())
    }

    /// Trains every remaining domain.
    pub fn run_to_end(&mut self) -> Result<()> {
        if self.steps_done() == 0 {
            self.train_first_domain()?;
        }
        while self.queues.pending_len() > 0 {
            self.train_incremental_domain()?;
        }
        Ok(())
    }

    /// Scores the final model on a domain that was never trained on.
    pub fn evaluate_unseen(&self, ds: &DomainDataset) -> Result<DomainScore> {
        if self.order.contains(&ds.spec.name) {
            return Err(Error::Config(format!(
                "domain {:?} was trained on",
                ds.spec.name
            )));
        }
        let model = self
            .latest_model()
            .ok_or_else(|| Error::State("no trained model to evaluate".into()))?;
        let (mae, rmse) = score(model, &ds.test)?;
        Ok(DomainScore {
            name: ds.spec.name.clone(),
            mae,
            rmse,
        })
    }
}

/// Result of the union-of-all-domains reference.
#[derive(Debug, Clone)]
pub struct JointOutcome {
    pub model: DensityRegressor,
    pub final_model: DensityRegressor,
    pub scores: Vec<DomainScore>,
    pub final_scores: Vec<DomainScore>,
    pub log: Vec<LossLogRecord>,
    pub epoch_log: Vec<EpochRecord>,
    pub instr: Instrumentation,
    /// Training images in the union, validation tails included.
    pub union_size: usize,
}

/// Trains one model from scratch on the shuffled union of every training
/// split with the count loss, validating on the pooled held-out tails.
pub fn run_joint(
    datasets: &[DomainDataset],
    cfg: &LossConfig,
    settings: &TrainSettings,
) -> Result<JointOutcome> {
    cfg.validate()?;
    settings.validate()?;
    if datasets.is_empty() {
        return Err(validation!("joint training needs at least one domain"));
    }
    let mut samples = Vec::new();
    let mut val = Vec::new();
    for (k, ds) in datasets.iter().enumerate() {
        let (fit_items, val_items) = validation_split(&ds.train);
        samples.extend(prepare(fit_items, k + 1, cfg.sigma)?);
        val.extend(val_items.iter());
    }
    let union_size: usize = datasets.iter().map(|d| d.train.len()).sum();
    let mut journal = Journal::new();
    journal.instr.max_retained_train = union_size;
    let ctx = FitContext {
        step: 1,
        domain: "joint",
        active_tag: None,
        teacher: None,
        cfg,
        settings,
    };
    let out = fit(
        DensityRegressor::new(settings.seed),
        &samples,
        &val,
        &ctx,
        &mut journal,
    )?;
    let seen: Vec<SeenDomain> = datasets
        .iter()
        .map(|d| SeenDomain {
            name: d.spec.name.clone(),
            test: d.test.clone(),
        })
        .collect();
    Ok(JointOutcome {
        scores: evaluate_seen(&out.best, &seen)?,
        final_scores: evaluate_seen(&out.last, &seen)?,
        model: out.best,
        final_model: out.last,
        log: journal.log,
        epoch_log: journal.epochs,
        instr: journal.instr,
        union_size,
    })
}
