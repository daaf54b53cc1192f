//! Optimization: AdamW with decoupled weight decay, linear warmup into a
//! cosine decay, deterministic batching, and binary checkpoints.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Batch, EvalCase};
use crate::evaluator::{evaluate, EvalReport, DEFAULT_CUTOFFS};
use crate::model::{decays, Model, NegativeSampler};
use crate::numerics::init::named_rng;
use crate::numerics::{DType, Gradients, ParameterStore, Real, Tensor};
use crate::schema::{BehaviorSchema, UserSequence};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub negatives: usize,
    pub rng_seed: u64,
    /// Score the validation cases after every epoch.
    pub validate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            epochs: 10,
            batch_size: 64,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
            negatives: 128,
            rng_seed: 0,
            validate: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("train.learning_rate = {} must be non-negative", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("train.warmup_fraction = {} must lie in [0, 1)", self.warmup_fraction));
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        if self.negatives == 0 {
            return bad("train.negatives must be at least 1".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("train.weight_decay = {} must be non-negative", self.weight_decay));
        }
        Ok(())
    }
}

/// Learning rate for update `step` of `total_steps`: linear from 0 to the
/// peak over the first `warmup_fraction` of steps, then cosine down to 0.
pub fn lr_schedule(step: usize, total_steps: usize, config: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::ZeroTotalSteps);
    }
    let peak = config.learning_rate;
    let step = step.min(total_steps);
    let warmup = (config.warmup_fraction * total_steps as f64).floor() as usize;
    if step <= warmup {
        return Ok(if warmup == 0 { peak } else { peak * step as f64 / warmup as f64 });
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(0.5 * peak * (1.0 + (PI * progress).cos()))
}

/// Adaptive moments with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    first: ParameterStore<T>,
    second: ParameterStore<T>,
}

impl<T: Real> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, first: ParameterStore::new(), second: ParameterStore::new() }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One update of every parameter that has a gradient in `grads`.
    pub fn step(&mut self, params: &mut ParameterStore<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.step));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step));
        let eps = T::lit(self.eps);
        let lr_t = T::lit(lr);
        for (name, g) in &grads.0 {
            let Some(p) = params.get_mut(name) else { continue };
            if !self.first.contains(name) {
                self.first.insert(name.as_str(), Tensor::zeros(g.shape()));
                self.second.insert(name.as_str(), Tensor::zeros(g.shape()));
            }
            let m = self.first.get_mut(name).expect("moment").data_mut();
            let v = self.second.get_mut(name).expect("moment").data_mut();
            let decay = if decays(name) { T::lit(lr * self.weight_decay) } else { T::zero() };
            for (k, (&gk, pk)) in g.data().iter().zip(p.data_mut()).enumerate() {
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *pk = *pk - decay * *pk - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Cuts sequences longer than `len` into windows of `len` that overlap by
/// one interaction, so every consecutive pair is a training target exactly once.
pub fn training_windows(sequences: &[UserSequence], len: usize) -> Vec<UserSequence> {
    let mut out = Vec::new();
    for seq in sequences {
        if seq.len() < 2 {
            continue;
        }
        if seq.len() <= len || len < 2 {
            out.push(seq.clone());
            continue;
        }
        let mut end = seq.len();
        loop {
            let start = end.saturating_sub(len);
            out.push(UserSequence {
                user: seq.user,
                external_id: seq.external_id.clone(),
                interactions: seq.interactions[start..end].to_vec(),
            });
            if start == 0 {
                break;
            }
            end = start + 1;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-target loss over the epoch.
    pub train_loss: f64,
    pub learning_rate: f64,
    pub val: Option<EvalReport>,
}

/// Trains `model` in place and returns one log entry per epoch; `on_epoch`
/// sees each entry as it is produced.
pub fn train<T: Real>(
    model: &mut Model<T>,
    schema: &BehaviorSchema,
    train_seqs: &[UserSequence],
    val: &[EvalCase],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    let mut windows = training_windows(train_seqs, model.config.max_len);
    if windows.is_empty() {
        return Err(Error::EmptySequence);
    }
    let per_epoch = windows.len().div_ceil(config.batch_size);
    let total = per_epoch * config.epochs;
    if total == 0 {
        return Err(Error::ZeroTotalSteps);
    }
    let mut order_rng = named_rng(config.rng_seed, "train.order");
    let mut sampler = NegativeSampler::new(named_rng(config.rng_seed, "train.negatives"), config.negatives);
    let mut dropout_rng = named_rng(config.rng_seed, "train.dropout");
    let mut opt = AdamW::new(config.weight_decay);
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        windows.shuffle(&mut order_rng);
        let (mut loss_sum, mut targets) = (0.0, 0usize);
        let mut lr = 0.0;
        for chunk in windows.chunks(config.batch_size) {
            step += 1;
            let refs: Vec<&UserSequence> = chunk.iter().collect();
            let batch = Batch::from_sequences(&refs, model.config.max_len);
            let candidates = sampler.for_batch(&batch, model.vocab.items)?;
            let dropout_seed = dropout_rng.random::<u64>();
            let dropout = (model.config.dropout > 0.0).then_some(dropout_seed);
            let (loss, grads) = model.loss_and_grads(&model.params, &batch, candidates, dropout);
            let loss = loss.to_f64();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, value: loss });
            }
            let n = batch.target_count();
            loss_sum += loss * n as f64;
            targets += n;
            lr = lr_schedule(step, total, config)?;
            opt.step(&mut model.params, &grads, lr);
        }
        let val = if config.validate && !val.is_empty() { Some(evaluate(model, schema, val, &DEFAULT_CUTOFFS)?) } else { None };
        let entry = EpochLog { epoch, train_loss: loss_sum / targets.max(1) as f64, learning_rate: lr, val };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(log)
}

/// Mean per-target loss over `sequences` with fixed negatives, no update.
pub fn mean_loss<T: Real>(model: &Model<T>, sequences: &[UserSequence], negatives: usize, seed: u64) -> Result<f64> {
    let windows = training_windows(sequences, model.config.max_len);
    let refs: Vec<&UserSequence> = windows.iter().collect();
    let batch = Batch::from_sequences(&refs, model.config.max_len);
    let mut sampler = NegativeSampler::new(named_rng(seed, "train.negatives"), negatives);
    let candidates = sampler.for_batch(&batch, model.vocab.items)?;
    Ok(model.loss_and_grads(&model.params, &batch, candidates, None).0.to_f64())
}

const MAGIC: &[u8; 4] = b"BITR";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes `store` as: magic, version, tensor count, per-tensor manifest
/// (name length, name, rank, extents, dtype code), then payloads in order.
pub fn save_checkpoint<T: Real>(store: &ParameterStore<T>, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        out.push(T::DTYPE as u8);
    }
    for (_, t) in store.iter() {
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    std::fs::write(path, out).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::CheckpointTruncated(format!("file ends inside {what} at byte {}", self.at)));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<ParameterStore<T>> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    decode_checkpoint(&bytes)
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<ParameterStore<T>> {
    let mut r = Reader { bytes, at: 0 };
    let magic = r.take(4, "magic bytes")?;
    if magic != MAGIC {
        return Err(Error::CheckpointFormat(format!("bad magic bytes {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let count = r.u32("tensor count")?;
    let mut manifest = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::CheckpointFormat("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let code = r.take(1, "dtype code")?[0];
        let dtype = DType::from_code(code).ok_or_else(|| Error::CheckpointFormat(format!("unknown dtype code {code}")))?;
        if dtype != T::DTYPE {
            return Err(Error::DTypeMismatch { found: code, expected: T::DTYPE as u8 });
        }
        manifest.push((name, shape));
    }
    let size = T::DTYPE.size();
    let mut store = ParameterStore::new();
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let payload = r.take(n * size, &format!("payload of `{name}`"))?;
        let data = payload.chunks_exact(size).map(T::read_le).collect();
        store.insert(name, Tensor::from_vec(&shape, data));
    }
    if r.at != bytes.len() {
        return Err(Error::CheckpointFormat(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(store)
}
