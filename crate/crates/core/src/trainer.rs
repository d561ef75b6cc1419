//! Stochastic subnetwork training: every batch trains one subnetwork, drawn
//! from a distribution over head counts, through a single forward and
//! backward pass.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{Augmentation, Checkpoint, Dataset, Normalization};
use crate::error::{Error, Result, TensorError};
use crate::eval::evaluate;
use crate::optim::{sgd_update, AdamW, OptimizerKind};
use crate::tensor::{for_each_run, Float, Tensor};
use crate::vit::{forward_on_tape, take_grads, ModelConfig, Params, SubnetworkView, UniversalWeights};

const WEIGHT_TOLERANCE: f64 = 1e-12;
const SHUFFLE_STREAM: u64 = 1 << 32;
const AUGMENT_STREAM: u64 = 2 << 32;

/// A distribution over head counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution")]
pub struct SamplingDistribution {
    support: Vec<usize>,
    weights: Vec<f64>,
}

#[derive(Deserialize)]
struct RawDistribution {
    support: Vec<usize>,
    weights: Vec<f64>,
}

impl TryFrom<RawDistribution> for SamplingDistribution {
    type Error = Error;

    fn try_from(raw: RawDistribution) -> Result<Self> {
        SamplingDistribution::new(raw.support, raw.weights)
    }
}

impl SamplingDistribution {
    /// `support` must be strictly increasing, `weights` non-negative and sum to one.
    pub fn new(support: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::config("sampling support is empty"));
        }
        if support.len() != weights.len() {
            return Err(Error::config(format!("{} weights for {} head counts", weights.len(), support.len())));
        }
        if support[0] == 0 || support.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!("support {support:?} must be distinct, increasing and positive")));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config(format!("weights {weights:?} must be finite and non-negative")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(Error::config(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { support, weights })
    }

    /// Divides `weights` by their sum first.
    pub fn normalized(support: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::config(format!("weights {weights:?} must be non-negative with a positive sum")));
        }
        let weights = weights.iter().map(|w| w / total).collect();
        Self::new(support, weights)
    }

    pub fn uniform(min: usize, max: usize) -> Result<Self> {
        if min == 0 || min > max {
            return Err(Error::config(format!("empty head range [{min}, {max}]")));
        }
        let n = max - min + 1;
        Ok(Self { support: (min..=max).collect(), weights: vec![1.0 / n as f64; n] })
    }

    pub fn point(k: usize) -> Result<Self> {
        Self::new(vec![k], vec![1.0])
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn probability(&self, k: usize) -> f64 {
        self.support.iter().position(|&s| s == k).map_or(0.0, |i| self.weights[i])
    }

    /// Checks that every head count is a valid subnetwork of `cfg`.
    pub fn validate_for(&self, cfg: &ModelConfig) -> Result<()> {
        for &k in &self.support {
            SubnetworkView::new(cfg, k)?;
        }
        Ok(())
    }

    /// Draws one head count using exactly one `u64` from `rng`.
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (&k, &w) in self.support.iter().zip(&self.weights) {
            acc += w;
            if u < acc {
                return k;
            }
        }
        // u fell in the rounding gap above the last cumulative sum.
        *self.support.iter().zip(&self.weights).rev().find(|(_, &w)| w > 0.0).unwrap().0
    }
}

/// Draws one head count from `dist`.
pub fn sample_k(rng: &mut impl Rng, dist: &SamplingDistribution) -> usize {
    dist.sample(rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Linear warmup, then cosine decay to zero.
    Cosine,
    /// Linear warmup, then constant.
    Constant,
}

/// Learning rate per optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub warmup: usize,
    pub total_steps: usize,
}

pub fn make_schedule(kind: ScheduleKind, base_lr: f64, warmup: usize, total_steps: usize) -> Result<Schedule> {
    if !(base_lr > 0.0) || !base_lr.is_finite() {
        return Err(Error::config(format!("learning rate {base_lr} must be positive")));
    }
    if warmup >= total_steps {
        return Err(Error::config(format!("warmup {warmup} must be shorter than the {total_steps} total steps")));
    }
    Ok(Schedule { kind, base_lr, warmup, total_steps })
}

impl Schedule {
    /// Rate for the update that follows `step` completed updates.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.base_lr * (step + 1) as f64 / self.warmup as f64;
        }
        match self.kind {
            ScheduleKind::Constant => self.base_lr,
            ScheduleKind::Cosine => {
                let span = (self.total_steps - self.warmup) as f64;
                let t = ((step - self.warmup) as f64 / span).min(1.0);
                0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

fn default_epochs() -> usize {
    10
}
fn default_batch_size() -> usize {
    128
}
fn default_lr() -> f64 {
    1e-3
}
fn default_weight_decay() -> f64 {
    0.05
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::AdamW
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_eps() -> f64 {
    1e-8
}
fn default_schedule() -> ScheduleKind {
    ScheduleKind::Cosine
}
fn default_warmup_fraction() -> f64 {
    0.05
}
fn default_eval_batch_size() -> usize {
    256
}

/// Training hyperparameters. Every field has a default, so configuration
/// files may give any subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
    /// `None` samples uniformly over every supported head count.
    #[serde(default)]
    pub distribution: Option<SamplingDistribution>,
    /// Warmup steps; `None` uses `warmup_fraction` of all steps.
    #[serde(default)]
    pub warmup_steps: Option<usize>,
    #[serde(default = "default_warmup_fraction")]
    pub warmup_fraction: f64,
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleKind,
    #[serde(default)]
    pub label_smoothing: f64,
    #[serde(default)]
    pub augmentation: Augmentation,
    #[serde(default = "default_eval_batch_size")]
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::config("batch sizes must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return Err(Error::config(format!("betas {:?} must lie in [0, 1)", self.betas)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) || !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("label smoothing and warmup fraction must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 || !(self.eps > 0.0) {
            return Err(Error::config("weight decay must be non-negative and eps positive"));
        }
        Ok(())
    }

    /// The configured distribution, or uniform over `cfg`'s supported head counts.
    pub fn resolved_distribution(&self, cfg: &ModelConfig) -> Result<SamplingDistribution> {
        let dist = match &self.distribution {
            Some(d) => d.clone(),
            None => SamplingDistribution::uniform(cfg.min_heads, cfg.num_heads)?,
        };
        dist.validate_for(cfg)?;
        Ok(dist)
    }

    pub fn batches_per_epoch(&self, train_len: usize) -> usize {
        train_len.div_ceil(self.batch_size)
    }

    pub fn schedule(&self, train_len: usize) -> Result<Schedule> {
        let total = self.epochs * self.batches_per_epoch(train_len);
        let warmup = match self.warmup_steps {
            Some(w) => w,
            None => ((total as f64 * self.warmup_fraction).round() as usize).min(total.saturating_sub(1)),
        };
        make_schedule(self.schedule, self.learning_rate, warmup, total)
    }

    fn adamw(&self) -> AdamW {
        AdamW { beta1: self.betas.0, beta2: self.betas.1, eps: self.eps, weight_decay: self.weight_decay }
    }
}

/// Position of `ChaCha8Rng` in a form that survives serialization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Per-epoch training results.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Number of batches trained at each sampled head count.
    pub histogram: BTreeMap<usize, u64>,
    pub mean_loss: BTreeMap<usize, f64>,
    /// Validation accuracy for every head count in the support.
    pub val_accuracy: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "epoch,k,batches,mean_loss,val_accuracy";

    /// One row per (epoch, supported k); `batches` and `mean_loss` are 0 and
    /// empty for head counts not sampled that epoch.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for e in &self.epochs {
            out.push_str(&EpochReport::csv_rows(e));
        }
        out
    }
}

impl EpochReport {
    pub fn csv_rows(&self) -> String {
        let mut ks: Vec<usize> = self.val_accuracy.keys().chain(self.histogram.keys()).copied().collect();
        ks.sort_unstable();
        ks.dedup();
        let mut out = String::new();
        for k in ks {
            let batches = self.histogram.get(&k).copied().unwrap_or(0);
            let loss = self.mean_loss.get(&k).map(|l| l.to_string()).unwrap_or_default();
            let acc = self.val_accuracy.get(&k).map(|a| a.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{k},{batches},{loss},{acc}\n", self.epoch));
        }
        out
    }
}

/// Where training stands; saved in checkpoints so a run can resume mid-epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    /// Zero-based epoch in progress.
    pub epoch: usize,
    /// Batches already trained in that epoch.
    pub batch: usize,
    /// Optimizer updates applied so far.
    pub step: u64,
    pub train_len: usize,
    pub rng: RngState,
    pub histogram: BTreeMap<usize, u64>,
    pub loss_sum: BTreeMap<usize, f64>,
    pub history: Vec<EpochReport>,
}

/// First and second AdamW moments, at universal shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: UniversalWeights<T>,
    pub v: UniversalWeights<T>,
}

impl<T: Float> Moments<T> {
    pub fn zeros_like(weights: &UniversalWeights<T>) -> Self {
        let z = weights.map(|_, t| Tensor::zeros(t.shape()));
        Self { m: z.clone(), v: z }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub k: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub step: StepOutcome,
    pub epoch: usize,
    /// Set when this batch finished an epoch.
    pub epoch_done: bool,
}

/// The order in which epoch `epoch` visits a dataset of `n` samples.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM + epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Owns the universal weights, optimizer state and progress of one run.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    cfg: ModelConfig,
    train_cfg: TrainConfig,
    dist: SamplingDistribution,
    schedule: Schedule,
    weights: UniversalWeights<T>,
    moments: Option<Moments<T>>,
    progress: TrainProgress,
    rng: ChaCha8Rng,
    order: Option<(usize, Vec<usize>)>,
}

impl<T: Float> Trainer<T> {
    /// Starts a run over a training set of `train_len` samples.
    pub fn new(
        cfg: ModelConfig,
        train_cfg: TrainConfig,
        weights: UniversalWeights<T>,
        train_len: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        train_cfg.validate()?;
        weights.check_layout(&cfg)?;
        if train_len == 0 {
            return Err(Error::Data(crate::DataError::Empty("training set has no samples".into())));
        }
        let dist = train_cfg.resolved_distribution(&cfg)?;
        let schedule = train_cfg.schedule(train_len)?;
        let moments = match train_cfg.optimizer {
            OptimizerKind::AdamW => Some(Moments::zeros_like(&weights)),
            OptimizerKind::Sgd => None,
        };
        let rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
        let progress = TrainProgress {
            epoch: 0,
            batch: 0,
            step: 0,
            train_len,
            rng: RngState::capture(&rng),
            histogram: BTreeMap::new(),
            loss_sum: BTreeMap::new(),
            history: Vec::new(),
        };
        Ok(Self { cfg, train_cfg, dist, schedule, weights, moments, progress, rng, order: None })
    }

    /// Continues the run saved in `ckpt`.
    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        let train_cfg =
            ckpt.train_config.ok_or_else(|| Error::config("checkpoint carries no training configuration"))?;
        let progress = ckpt.progress.ok_or_else(|| Error::config("checkpoint carries no training progress"))?;
        let mut trainer = Self::new(ckpt.config, train_cfg, ckpt.weights, progress.train_len)?;
        match (trainer.train_cfg.optimizer, ckpt.moments) {
            (OptimizerKind::AdamW, Some(m)) => {
                m.m.check_layout(&trainer.cfg)?;
                m.v.check_layout(&trainer.cfg)?;
                trainer.moments = Some(m);
            }
            (OptimizerKind::Sgd, None) => {}
            _ => return Err(Error::config("optimizer state does not match the optimizer kind")),
        }
        trainer.rng = progress.rng.restore();
        trainer.progress = progress;
        Ok(trainer)
    }

    /// Snapshot of the run; `normalization` describes the training inputs.
    pub fn checkpoint(&self, normalization: Option<Normalization>) -> Checkpoint<T> {
        let mut progress = self.progress.clone();
        progress.rng = RngState::capture(&self.rng);
        Checkpoint {
            config: self.cfg.clone(),
            weights: self.weights.clone(),
            moments: self.moments.clone(),
            progress: Some(progress),
            train_config: Some(self.train_cfg.clone()),
            normalization,
        }
    }

    pub fn weights(&self) -> &UniversalWeights<T> {
        &self.weights
    }

    pub fn into_weights(self) -> UniversalWeights<T> {
        self.weights
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train_cfg
    }

    pub fn distribution(&self) -> &SamplingDistribution {
        &self.dist
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn progress(&self) -> &TrainProgress {
        &self.progress
    }

    pub fn is_finished(&self) -> bool {
        self.progress.epoch >= self.train_cfg.epochs
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.train_cfg.batches_per_epoch(self.progress.train_len)
    }

    /// Samples one head count and trains that subnetwork on the batch.
    pub fn train_step(&mut self, images: &Tensor<T>, labels: &[usize]) -> Result<StepOutcome> {
        let k = self.dist.sample(&mut self.rng);
        self.train_step_at(k, images, labels)
    }

    /// One forward, backward and optimizer update of subnetwork `k`. Only
    /// the parameter blocks that subnetwork uses (and their moments) change.
    pub fn train_step_at(&mut self, k: usize, images: &Tensor<T>, labels: &[usize]) -> Result<StepOutcome> {
        let view = SubnetworkView::new(&self.cfg, k)?;
        let lr = self.schedule.lr(self.progress.step as usize);
        let non_finite = |e: Error, p: &TrainProgress| match e {
            Error::Tensor(TensorError::NonFinite { .. }) => {
                Error::NonFiniteLoss { epoch: p.epoch, step: p.step, k, lr }
            }
            e => e,
        };
        let mut tape = Tape::new();
        let dropout = (self.cfg.dropout > 0.0).then_some(&mut self.rng);
        let out = forward_on_tape(&mut tape, &self.weights, &self.cfg, &view, images, dropout)
            .map_err(|e| non_finite(e, &self.progress))?;
        let loss = tape
            .cross_entropy(out.logits, labels, self.train_cfg.label_smoothing)
            .map_err(|e| non_finite(e.into(), &self.progress))?;
        let loss_value = tape.value(loss).data()[0].to_f64_lossless();
        if !loss_value.is_finite() {
            return Err(non_finite(Error::Tensor(TensorError::NonFinite { op: "loss" }), &self.progress));
        }
        let mut grads = tape.backward(loss).map_err(|e| non_finite(e.into(), &self.progress))?;
        let grads = take_grads(&mut grads, &out.bound);
        drop(tape);
        self.apply_update(&view, &grads, lr);
        self.progress.step += 1;
        Ok(StepOutcome { k, loss: loss_value, lr })
    }

    fn apply_update(&mut self, view: &SubnetworkView, grads: &Params<Option<Tensor<T>>>, lr: f64) {
        let grads = grads.entries();
        match &mut self.moments {
            Some(moments) => {
                let rule = self.train_cfg.adamw().step::<T>(self.progress.step + 1, lr);
                let params = self.weights.entries_mut();
                let ms = moments.m.entries_mut();
                let vs = moments.v.entries_mut();
                for ((((info, p), (_, m)), (_, v)), (_, g)) in params.into_iter().zip(ms).zip(vs).zip(grads) {
                    let Some(g) = g else { continue };
                    let spec = info.active_spec(p.shape(), view).expect("a bound slot is active");
                    let (pd, md, vd, gd) = (p.data_mut(), m.data_mut(), v.data_mut(), g.data());
                    let decay = info.decays();
                    let mut cursor = 0;
                    for_each_run(&spec.view, &spec.block, |offset, len| {
                        for i in 0..len {
                            let j = offset + i;
                            rule.apply(&mut pd[j], gd[cursor + i], &mut md[j], &mut vd[j], decay);
                        }
                        cursor += len;
                    });
                }
            }
            None => {
                let rate = T::lit(lr);
                let shrink = T::lit(1.0 - lr * self.train_cfg.weight_decay);
                for ((info, p), (_, g)) in self.weights.entries_mut().into_iter().zip(grads) {
                    let Some(g) = g else { continue };
                    let spec = info.active_spec(p.shape(), view).expect("a bound slot is active");
                    let (pd, gd) = (p.data_mut(), g.data());
                    let decay = info.decays() && self.train_cfg.weight_decay > 0.0;
                    let mut cursor = 0;
                    for_each_run(&spec.view, &spec.block, |offset, len| {
                        for i in 0..len {
                            if decay {
                                pd[offset + i] *= shrink;
                            }
                            sgd_update(&mut pd[offset + i], gd[cursor + i], rate);
                        }
                        cursor += len;
                    });
                }
            }
        }
    }

    /// Trains the next batch of the run, or returns `None` once all epochs are done.
    pub fn train_next_batch(&mut self, train: &Dataset) -> Result<Option<BatchOutcome>> {
        if self.is_finished() {
            return Ok(None);
        }
        if train.len() != self.progress.train_len {
            return Err(Error::config(format!(
                "training set has {} samples, the run was set up for {}",
                train.len(),
                self.progress.train_len
            )));
        }
        let epoch = self.progress.epoch;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.order = Some((epoch, epoch_order(self.train_cfg.seed, epoch, train.len())));
        }
        let bs = self.train_cfg.batch_size;
        let start = self.progress.batch * bs;
        let order = &self.order.as_ref().unwrap().1;
        let indices = &order[start..(start + bs).min(order.len())];
        let aug = self.train_cfg.augmentation;
        let (images, labels) = if aug.is_identity() {
            train.batch::<T>(indices)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(self.train_cfg.seed);
            rng.set_stream(AUGMENT_STREAM + (epoch * self.batches_per_epoch() + self.progress.batch) as u64);
            train.batch_augmented::<T>(indices, &aug, &mut rng)
        };
        let step = self.train_step(&images, &labels)?;
        *self.progress.histogram.entry(step.k).or_insert(0) += 1;
        *self.progress.loss_sum.entry(step.k).or_insert(0.0) += step.loss;
        self.progress.batch += 1;
        let epoch_done = self.progress.batch == self.batches_per_epoch();
        if epoch_done {
            let histogram = std::mem::take(&mut self.progress.histogram);
            let loss_sum = std::mem::take(&mut self.progress.loss_sum);
            let mean_loss = loss_sum.iter().map(|(&k, &s)| (k, s / histogram[&k] as f64)).collect();
            self.progress.history.push(EpochReport { epoch, histogram, mean_loss, val_accuracy: BTreeMap::new() });
            self.progress.epoch += 1;
            self.progress.batch = 0;
        }
        Ok(Some(BatchOutcome { step, epoch, epoch_done }))
    }

    /// Validation accuracy for every head count in the support.
    pub fn validate(&self, val: &Dataset) -> Result<BTreeMap<usize, f64>> {
        self.dist
            .support()
            .iter()
            .map(|&k| Ok((k, evaluate(&self.weights, &self.cfg, k, val, self.train_cfg.eval_batch_size)?)))
            .collect()
    }

    /// Fills in validation accuracy for the epoch that just finished.
    pub fn validate_epoch(&mut self, val: &Dataset) -> Result<EpochReport> {
        let acc = self.validate(val)?;
        let report = self.progress.history.last_mut().ok_or_else(|| Error::config("no finished epoch to validate"))?;
        report.val_accuracy = acc;
        Ok(report.clone())
    }

    /// Runs the remaining epochs, validating after each one. `on_epoch` sees
    /// every finished epoch report.
    pub fn run(
        &mut self,
        train: &Dataset,
        val: &Dataset,
        mut on_epoch: impl FnMut(&EpochReport),
    ) -> Result<TrainReport> {
        if val.is_empty() {
            return Err(Error::Data(crate::DataError::Empty("validation set has no samples".into())));
        }
        while let Some(outcome) = self.train_next_batch(train)? {
            if outcome.epoch_done {
                on_epoch(&self.validate_epoch(val)?);
            }
        }
        Ok(self.report())
    }

    pub fn report(&self) -> TrainReport {
        TrainReport { epochs: self.progress.history.clone() }
    }
}

/// Trains `weights` from scratch on `train`, validating on `val` each epoch.
pub fn train<T: Float>(
    weights: UniversalWeights<T>,
    cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
) -> Result<(UniversalWeights<T>, TrainReport)> {
    let mut trainer = Trainer::new(cfg.clone(), train_cfg.clone(), weights, train.len())?;
    let report = trainer.run(train, val, |_| {})?;
    Ok((trainer.into_weights(), report))
}
