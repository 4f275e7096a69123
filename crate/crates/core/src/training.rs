//! AdamW with a one-cycle learning-rate schedule, global-norm gradient
//! clipping, dropout and the training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{save_checkpoint, Utterance};
use crate::numerics::{Backend, NumericsError, Tape, Tensor};
use crate::transducer::{greedy_decode, token_error_rate, TransducerModel};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter moments, created lazily on the first update.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        Some((self.first.get(name)?, self.second.get(name)?))
    }

    /// One decoupled-weight-decay update of `param`, using the bias
    /// corrections for the current step count (call [`Self::begin_step`]
    /// first).
    fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: crate::numerics::OpKind::Custom("adamw"),
                detail: format!("{name}: param {:?} vs grad {:?}", param.shape(), grad.shape()),
            }
            .into());
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let m = self
            .first
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        if m.shape() != param.shape() {
            return Err(Error::Config(format!("{name}: optimizer moment has a stale shape")));
        }
        let v = self
            .second
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, (w, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= lr * weight_decay * *w + lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }

    fn begin_step(&mut self) {
        self.step += 1;
    }
}

/// Updates every entry of `params`; missing gradients count as zero.
pub fn adamw_step(
    state: &mut OptimizerState,
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
) -> Result<()> {
    state.begin_step();
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).cloned().unwrap_or_else(|| Tensor::zeros(p.shape()));
        state.update(name, p, &g, lr)?;
    }
    Ok(())
}

/// [`adamw_step`] over all parameters of a transducer.
pub fn adamw_step_model(
    state: &mut OptimizerState,
    model: &mut TransducerModel,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
) -> Result<()> {
    state.begin_step();
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    for name in names {
        let slot = model.param_mut(&name).expect("name comes from the model");
        let p = Arc::make_mut(slot);
        let g = grads.get(&name).cloned().unwrap_or_else(|| Tensor::zeros(p.shape()));
        state.update(&name, p, &g, lr)?;
    }
    Ok(())
}

/// One-cycle schedule: linear ramp from `peak/10` to `peak` over the
/// warm-up epochs, linear ramp down to `peak/100` over the decay epochs,
/// constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: usize,
    pub steps_per_epoch: usize,
}

impl ScheduleConfig {
    pub fn initial_lr(&self) -> f64 {
        self.peak_lr / 10.0
    }

    pub fn min_lr(&self) -> f64 {
        self.peak_lr / 100.0
    }

    pub fn total_epochs(&self) -> usize {
        self.warmup_epochs + self.decay_epochs
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::Config("peak learning rate must be positive".into()));
        }
        if self.steps_per_epoch == 0 {
            return Err(Error::Config("steps per epoch must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let step = step as f64;
        let warm = (self.warmup_epochs * self.steps_per_epoch) as f64;
        let decay = (self.decay_epochs * self.steps_per_epoch) as f64;
        if step < warm {
            self.initial_lr() + (self.peak_lr - self.initial_lr()) * step / warm
        } else if step < warm + decay {
            self.peak_lr + (self.min_lr() - self.peak_lr) * (step - warm) / decay
        } else if decay > 0.0 {
            self.min_lr()
        } else {
            self.peak_lr
        }
    }
}

/// Rescales all gradients by `c / ||g||` when the global norm exceeds `c`.
/// With `unconditional`, rescales whatever the norm. Returns the norm
/// before clipping.
pub fn clip_gradients(grads: &mut BTreeMap<String, Tensor>, c: f64, unconditional: bool) -> Result<f64> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Config("clipping threshold must be positive".into()));
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(NumericsError::NonFinite {
            op: crate::numerics::OpKind::Custom("clip_gradients"),
        }
        .into());
    }
    if norm > 0.0 && (unconditional || norm > c) {
        let scale = c / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    Ok(norm)
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().map(Tensor::l2_norm_sq).sum::<f64>().sqrt()
}

/// Inverted dropout: in training mode each entry is zeroed with
/// probability `p` and survivors are scaled by `1/(1-p)`.
pub fn apply_dropout<R: Rng + ?Sized>(t: &Tensor, p: f64, rng: &mut R, training: bool) -> Tensor {
    if !training || p == 0.0 {
        return t.clone();
    }
    let mut out = t.clone();
    let mask = dropout_mask(t.len(), p, rng);
    for (v, m) in out.data_mut().iter_mut().zip(mask) {
        *v *= m;
    }
    out
}

fn dropout_mask<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

/// Dropout applied during a recorded forward pass: `input` before every
/// recurrent layer and `embedding` on the prediction-network embedding.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub p_input: f64,
    pub p_embed: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(p_input: f64, p_embed: f64, rng: ChaCha8Rng) -> Result<Self> {
        for p in [p_input, p_embed] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
            }
        }
        Ok(Self { p_input, p_embed, rng })
    }

    fn apply<B: Backend>(&mut self, be: &mut B, x: &B::Value, p: f64) -> Result<B::Value> {
        if p == 0.0 {
            return Ok(x.clone());
        }
        let mask = dropout_mask(be.value(x).len(), p, &mut self.rng);
        let mask = be.constant(Tensor::vector(mask));
        Ok(be.mul(x, &mask)?)
    }

    pub fn input<B: Backend>(&mut self, be: &mut B, x: &B::Value) -> Result<B::Value> {
        let p = self.p_input;
        self.apply(be, x, p)
    }

    pub fn embedding<B: Backend>(&mut self, be: &mut B, x: &B::Value) -> Result<B::Value> {
        let p = self.p_embed;
        self.apply(be, x, p)
    }
}

fn default_batch() -> usize {
    8
}
fn default_clip() -> f64 {
    10.0
}
fn default_p_input() -> f64 {
    0.25
}
fn default_p_embed() -> f64 {
    0.05
}
fn default_warmup() -> usize {
    6
}
fn default_decay() -> usize {
    14
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub peak_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "default_decay")]
    pub decay_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Global-norm clipping threshold `c`.
    #[serde(default = "default_clip")]
    pub clip: f64,
    /// Rescale to norm `c` on every step instead of only above `c`.
    #[serde(default)]
    pub clip_unconditional: bool,
    #[serde(default = "default_p_input")]
    pub p_input: f64,
    #[serde(default = "default_p_embed")]
    pub p_embed: f64,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub seed: u64,
}

impl TrainingConfig {
    pub fn new(peak_lr: f64) -> Self {
        Self {
            peak_lr,
            warmup_epochs: default_warmup(),
            decay_epochs: default_decay(),
            batch_size: default_batch(),
            clip: default_clip(),
            clip_unconditional: false,
            p_input: default_p_input(),
            p_embed: default_p_embed(),
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }

    pub fn epochs(&self) -> usize {
        self.warmup_epochs + self.decay_epochs
    }

    pub fn schedule(&self, dataset_len: usize) -> ScheduleConfig {
        ScheduleConfig {
            peak_lr: self.peak_lr,
            warmup_epochs: self.warmup_epochs,
            decay_epochs: self.decay_epochs,
            steps_per_epoch: dataset_len.div_ceil(self.batch_size.max(1)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return Err(Error::Config("clipping threshold must be positive".into()));
        }
        for p in [self.p_input, self.p_embed] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
            }
        }
        self.schedule(1).validate()
    }
}

/// Mean loss and mean gradient over a batch. Each element gets its own
/// tape and dropout stream; gradients are summed in batch order.
pub fn batch_gradients(
    model: &TransducerModel,
    batch: &[&Utterance],
    dropout: Option<(f64, f64, &[u64])>,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let run = |i: usize| -> Result<(f64, BTreeMap<String, Tensor>)> {
        let utt = batch[i];
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape)?;
        let mut drop = match dropout {
            Some((p_in, p_emb, streams)) => {
                Some(Dropout::new(p_in, p_emb, ChaCha8Rng::seed_from_u64(streams[i]))?)
            }
            None => None,
        };
        let loss = bound.loss(&mut tape, &utt.features, &utt.labels, drop.as_mut())?;
        let value = tape.value(&loss).data()[0];
        tape.backward(loss)?;
        Ok((value, tape.gradients()))
    };
    let results: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = if batch.len() > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..batch.len()).map(|i| scope.spawn(move || run(i))).collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        })
    } else {
        (0..batch.len()).map(run).collect()
    };
    let n = batch.len() as f64;
    let mut total = 0.0;
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for r in results {
        let (loss, g) = r?;
        total += loss;
        for (name, t) in g {
            match grads.get_mut(&name) {
                Some(acc) => acc.add_assign(&t),
                None => {
                    grads.insert(name, t);
                }
            }
        }
    }
    for g in grads.values_mut() {
        g.scale_in_place(1.0 / n);
    }
    Ok((total / n, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    /// Mean per-utterance loss over the epoch.
    pub loss: f64,
    pub token_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,lr,loss,token_error\n");
        for r in &self.epochs {
            let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.step, r.lr, r.loss, r.token_error);
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions<'a> {
    /// Writes `epoch_NNN.ckpt` after every epoch when set.
    pub checkpoint_dir: Option<PathBuf>,
    /// Utterances scored for the per-epoch token error; the training set
    /// when unset.
    pub eval: Option<&'a [Utterance]>,
    /// Stop after this many epochs (the schedule still spans all of them).
    pub max_epochs: Option<usize>,
}

/// Greedy-decoding token error over a set of utterances.
pub fn evaluate(model: &TransducerModel, data: &[Utterance]) -> Result<f64> {
    let hyps = data
        .iter()
        .map(|u| greedy_decode(model, &u.features).map(|r| r.labels))
        .collect::<Result<Vec<_>>>()?;
    Ok(token_error_rate(
        hyps.iter().zip(data).map(|(h, u)| (h.as_slice(), u.labels.as_slice())),
    ))
}

fn is_divergence(e: &Error) -> bool {
    matches!(
        e,
        Error::Numerics(NumericsError::NonFinite { .. }) | Error::Numerics(NumericsError::NonFiniteObjective { .. })
    )
}

/// Trains `model` in place. Deterministic for a fixed config and seed.
pub fn fit(
    model: &mut TransducerModel,
    dataset: &[Utterance],
    config: &TrainingConfig,
    options: &FitOptions<'_>,
) -> Result<TrainingLog> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let schedule = config.schedule(dataset.len());
    let mut opt = OptimizerState::new(config.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = TrainingLog::default();
    let mut batch_id = 0usize;
    let epochs = options.max_epochs.map_or(schedule.total_epochs(), |m| m.min(schedule.total_epochs()));
    if let Some(dir) = &options.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = schedule.lr_at(opt.step);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Utterance> = chunk.iter().map(|&i| &dataset[i]).collect();
            let streams: Vec<u64> = chunk.iter().map(|_| rng.random()).collect();
            let (loss, mut grads) = batch_gradients(model, &batch, Some((config.p_input, config.p_embed, &streams)))
                .map_err(|e| if is_divergence(&e) { Error::Divergence { batch: batch_id } } else { e })?;
            if !loss.is_finite() {
                return Err(Error::Divergence { batch: batch_id });
            }
            clip_gradients(&mut grads, config.clip, config.clip_unconditional)
                .map_err(|_| Error::Divergence { batch: batch_id })?;
            lr = schedule.lr_at(opt.step);
            adamw_step_model(&mut opt, model, &grads, lr)?;
            model.project_constraints();
            epoch_loss += loss * batch.len() as f64;
            batch_id += 1;
        }
        let token_error = evaluate(model, options.eval.unwrap_or(dataset))?;
        let record = EpochRecord {
            epoch,
            step: opt.step,
            lr,
            loss: epoch_loss / dataset.len() as f64,
            token_error,
        };
        if let Some(dir) = &options.checkpoint_dir {
            save_checkpoint(model, &dir.join(format!("epoch_{epoch:03}.ckpt")))?;
        }
        log.epochs.push(record);
    }
    Ok(log)
}
