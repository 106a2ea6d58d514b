//! Story-reconstruction training: masked per-token cross-entropy, gradient
//! accumulation, global-norm clipping and Adam with linear warmup.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::TrainingExample;
use crate::model::Model;
use crate::rng::Rng;
use crate::tensor::{softmax_in_place, Tensor};
use crate::tokenizer::{Tokenizer, BOS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub micro_batch: usize,
    pub accumulation_steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: u64,
    /// After this many updates the rate has decayed linearly to zero; `0` keeps it constant.
    #[serde(default)]
    pub decay_steps: u64,
    /// Updates before the linear decay begins.
    #[serde(default)]
    pub decay_start: u64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            micro_batch: 1,
            accumulation_steps: 16,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_steps: 100,
            decay_steps: 0,
            decay_start: 0,
            grad_clip: 1.0,
            seed: 7,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.accumulation_steps < 1 || self.micro_batch < 1 {
            return Err(Error::Invalid("accumulation_steps and micro_batch must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Invalid("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Invalid("adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Invalid("grad_clip must be non-negative".into()));
        }
        if self.decay_steps > 0 && self.decay_start >= self.decay_steps {
            return Err(Error::Invalid("decay_start must come before decay_steps".into()));
        }
        if self.precision != Precision::F64 {
            return Err(Error::Invalid("only 64-bit precision is implemented".into()));
        }
        Ok(())
    }

    /// Examples per optimizer update.
    pub fn group_size(&self) -> usize {
        self.micro_batch * self.accumulation_steps
    }

    /// Learning rate for the update with zero-based index `step`: linear warmup,
    /// then constant or linearly decaying.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            f64::min(1.0, (step + 1) as f64 / self.warmup_steps as f64)
        };
        let decay = if self.decay_steps == 0 {
            1.0
        } else {
            let into = step.saturating_sub(self.decay_start) as f64;
            f64::max(0.0, 1.0 - into / (self.decay_steps - self.decay_start) as f64)
        };
        self.learning_rate * warm * decay
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    /// One-based optimizer step.
    pub step: u64,
    pub epoch: usize,
    /// Per-token loss over the update's examples.
    pub mean_loss: f64,
    pub tokens: usize,
    pub grad_norm: f64,
    pub learning_rate: f64,
    pub tokens_per_sec: f64,
    pub wall_time_secs: f64,
}

/// A training example in model-ready form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedExample {
    pub story_id: String,
    /// `[BOS] context target`.
    pub input_ids: Vec<u32>,
    /// Next-token target per input position; `None` outside the target window.
    pub targets: Vec<Option<u32>>,
    pub distance_ids: Vec<u32>,
    pub future_ids: Vec<u32>,
    pub distance: usize,
}

impl PreparedExample {
    /// Builds decoder input and loss mask. Context tokens are dropped from the left
    /// when the sequence would exceed `max_seq`.
    pub fn new(example: &TrainingExample, tokenizer: &Tokenizer, max_seq: usize) -> Result<Self> {
        if example.target_ids.is_empty() {
            return Err(Error::EmptyTarget);
        }
        if example.future_ids.is_empty() {
            return Err(Error::EmptyFuture);
        }
        let tgt = &example.target_ids;
        if tgt.len() + 1 > max_seq {
            return Err(Error::SequenceTooLong {
                len: tgt.len() + 1,
                max: max_seq,
            });
        }
        let room = max_seq - 1 - tgt.len();
        let ctx = &example.context_ids[example.context_ids.len().saturating_sub(room)..];
        let mut input_ids = Vec::with_capacity(1 + ctx.len() + tgt.len());
        input_ids.push(BOS);
        input_ids.extend_from_slice(ctx);
        input_ids.extend_from_slice(tgt);
        let mut targets = vec![None; input_ids.len()];
        // Row i predicts input i + 1; target token j sits at input 1 + ctx.len() + j.
        for (j, &t) in tgt.iter().enumerate() {
            targets[ctx.len() + j] = Some(t);
        }
        Ok(PreparedExample {
            story_id: example.story_id.clone(),
            input_ids,
            targets,
            distance_ids: distance_ids(tokenizer, example.future_distance),
            future_ids: example.future_ids.clone(),
            distance: example.future_distance,
        })
    }

    pub fn target_tokens(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

/// Token ids of the decimal distance string.
pub fn distance_ids(tokenizer: &Tokenizer, distance: usize) -> Vec<u32> {
    tokenizer.encode(&distance.to_string())
}

/// Mean cross-entropy of `logits` over the target positions of `example`.
pub fn reconstruction_loss(logits: &Tensor, example: &PreparedExample) -> Result<f64> {
    if logits.rows() != example.targets.len() {
        return Err(Error::Shape {
            op: "reconstruction_loss",
            lhs: logits.shape().to_vec(),
            rhs: vec![example.targets.len()],
        });
    }
    let n = example.target_tokens();
    if n == 0 {
        return Err(Error::EmptyTarget);
    }
    let mut total = 0.0;
    let mut row = vec![0.0; logits.cols()];
    for (r, t) in example.targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        row.copy_from_slice(logits.row(r));
        softmax_in_place(&mut row);
        total -= libm::log(row[t as usize]);
    }
    Ok(total / n as f64)
}

/// Records the example's full forward pass and returns `scale * Σ token CE`.
pub fn example_loss_graph(model: &Model, g: &mut Graph<'_>, example: &PreparedExample, scale: f64) -> Result<Var> {
    let cond = model.condition_graph(g, &example.distance_ids, &example.future_ids)?;
    let logits = model.decoder_graph(g, &example.input_ids, &cond)?;
    g.cross_entropy(logits, &example.targets, scale)
}

/// Teacher-forced next-token accuracy over target positions.
pub fn target_accuracy(model: &Model, examples: &[PreparedExample]) -> Result<f64> {
    let mut hit = 0usize;
    let mut total = 0usize;
    for ex in examples {
        let cond = model.condition(ex.distance, &ex.distance_ids, &ex.future_ids)?;
        let logits = model.decoder_forward(&ex.input_ids, &cond)?;
        for (r, t) in ex.targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            total += 1;
            hit += usize::from(argmax(logits.row(r)) == t as usize);
        }
    }
    if total == 0 {
        return Err(Error::EmptyTarget);
    }
    Ok(hit as f64 / total as f64)
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub steps: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Tensor> = model.params().ids().map(|id| Tensor::zeros(model.params().value(id).shape())).collect();
        AdamState {
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn check(&self, model: &Model) -> Result<()> {
        let p = model.params();
        let ok = self.m.len() == p.len()
            && self.v.len() == p.len()
            && p.ids().all(|id| {
                self.m[id.index()].shape() == p.value(id).shape() && self.v[id.index()].shape() == p.value(id).shape()
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid("optimizer state does not match the model parameters".into()))
        }
    }
}

/// Position in the epoch schedule, for resuming.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    /// Updates already applied within `epoch`.
    pub group_in_epoch: usize,
    /// Updates applied in total.
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Gradient norm and loss of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub mean_loss: f64,
    pub tokens: usize,
    pub grad_norm: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    config: TrainConfig,
    adam: AdamState,
    progress: Progress,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: &Model) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            config,
            adam: AdamState::new(model),
            progress: Progress::default(),
        })
    }

    /// Restores a trainer from saved optimizer state and schedule position.
    pub fn resume(config: TrainConfig, model: &Model, adam: AdamState, progress: Progress) -> Result<Self> {
        config.validate()?;
        adam.check(model)?;
        if adam.steps != progress.step {
            return Err(Error::Invalid(format!(
                "optimizer has {} steps but progress records {}",
                adam.steps, progress.step
            )));
        }
        Ok(Trainer { config, adam, progress })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    /// One optimizer update over `group`, split into micro-batches of
    /// `micro_batch` examples. The loss is averaged over every target token of
    /// the group, so the split does not change the update.
    pub fn train_step(&mut self, model: &mut Model, group: &[PreparedExample]) -> Result<StepOutcome> {
        if group.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let tokens: usize = group.iter().map(PreparedExample::target_tokens).sum();
        if tokens == 0 {
            return Err(Error::EmptyTarget);
        }
        let scale = 1.0 / tokens as f64;
        model.params_mut().zero_grads();
        let mut loss_sum = 0.0;
        for micro in group.chunks(self.config.micro_batch) {
            let grads = {
                let mut g = Graph::new(model.params());
                let mut total: Option<Var> = None;
                for ex in micro {
                    let l = example_loss_graph(model, &mut g, ex, scale)?;
                    let value = g.scalar(l)?;
                    if !value.is_finite() {
                        return Err(Error::NonFiniteLoss {
                            loss: value / scale,
                            example: ex.story_id.clone(),
                        });
                    }
                    loss_sum += value;
                    total = Some(match total {
                        Some(t) => g.add(t, l)?,
                        None => l,
                    });
                }
                g.backward(total.ok_or(Error::EmptyTarget)?)?
            };
            model.params_mut().accumulate(&grads)?;
        }
        let grad_norm = model.params().grad_norm();
        if self.config.grad_clip > 0.0 && grad_norm > self.config.grad_clip {
            model.params_mut().scale_grads(self.config.grad_clip / grad_norm);
        }
        let lr = self.config.lr_at(self.adam.steps);
        self.apply_adam(model, lr);
        model.params_mut().zero_grads();
        self.progress.step += 1;
        Ok(StepOutcome {
            mean_loss: loss_sum,
            tokens,
            grad_norm,
            learning_rate: lr,
        })
    }

    fn apply_adam(&mut self, model: &mut Model, lr: f64) {
        let c = &self.config;
        self.adam.steps += 1;
        let t = self.adam.steps as f64;
        let bc1 = 1.0 - libm::pow(c.beta1, t);
        let bc2 = 1.0 - libm::pow(c.beta2, t);
        let params = model.params_mut();
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let grad = params.grad(id).data().to_vec();
            let m = self.adam.m[i].data_mut();
            let v = self.adam.v[i].data_mut();
            let w = params.value_mut(id).data_mut();
            for k in 0..grad.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * grad[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * grad[k] * grad[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                w[k] -= lr * mh / (libm::sqrt(vh) + c.adam_eps);
            }
        }
    }

    /// Runs the remaining schedule. `now` returns seconds since an arbitrary
    /// origin; `on_step` sees each record and may stop training early.
    pub fn fit<N, F>(&mut self, model: &mut Model, examples: &[PreparedExample], now: N, mut on_step: F) -> Result<Vec<TrainRecord>>
    where
        N: Fn() -> f64,
        F: FnMut(&TrainRecord, &Trainer, &Model) -> Result<Control>,
    {
        if examples.is_empty() {
            return Err(Error::Invalid("dataset is empty".into()));
        }
        let start = now();
        let mut records = Vec::new();
        while self.progress.epoch < self.config.epochs {
            let order = epoch_order(self.config.seed, self.progress.epoch, examples.len());
            let groups: Vec<&[usize]> = order.chunks(self.config.group_size()).collect();
            while self.progress.group_in_epoch < groups.len() {
                let batch: Vec<PreparedExample> = groups[self.progress.group_in_epoch]
                    .iter()
                    .map(|&i| examples[i].clone())
                    .collect();
                let t0 = now();
                let out = self.train_step(model, &batch)?;
                self.progress.group_in_epoch += 1;
                let t1 = now();
                let epoch = self.progress.epoch;
                if self.progress.group_in_epoch == groups.len() {
                    self.progress.epoch += 1;
                    self.progress.group_in_epoch = 0;
                }
                let record = TrainRecord {
                    step: self.progress.step,
                    epoch,
                    mean_loss: out.mean_loss,
                    tokens: out.tokens,
                    grad_norm: out.grad_norm,
                    learning_rate: out.learning_rate,
                    tokens_per_sec: if t1 > t0 { out.tokens as f64 / (t1 - t0) } else { 0.0 },
                    wall_time_secs: t1 - start,
                };
                let control = on_step(&record, self, model)?;
                records.push(record);
                if control == Control::Stop {
                    return Ok(records);
                }
                if self.progress.epoch != epoch {
                    break;
                }
            }
        }
        Ok(records)
    }
}

/// Example order for one epoch; depends only on `(seed, epoch, n)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::with_stream(seed, epoch as u64).shuffle(&mut order);
    order
}
