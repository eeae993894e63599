//! Joint multi-granularity training: one forward/backward per trained
//! granularity into shared gradient buffers, then a single AdamW update.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::io::checkpoint::save_checkpoint;
use crate::io::data::{ImageDataset, Normalization};
use crate::io::metrics::MetricsSink;
use crate::model::{GranularityConfig, ModelKind, ModelParams};
use crate::params::ParamStore;
use crate::scalar::{lit, Scalar};
use crate::ssd::{ScanMode, DEFAULT_CHUNK};
use crate::tensor::Tensor;

fn d_lr() -> f64 {
    3e-4
}
fn d_wd() -> f64 {
    0.1
}
fn d_betas() -> [f64; 2] {
    [0.9, 0.95]
}
fn d_eps() -> f64 {
    1e-8
}
fn d_warmup() -> usize {
    100
}
fn d_total() -> usize {
    2000
}
fn d_clip() -> f64 {
    1.0
}
fn d_batch() -> usize {
    16
}
fn d_seq() -> usize {
    256
}
fn d_min_lr_ratio() -> f64 {
    0.1
}
fn d_eval_every() -> usize {
    250
}
fn d_eval_batches() -> usize {
    8
}
fn d_val_fraction() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Loss weight per trained granularity; empty means uniform `1/g`.
    #[serde(default)]
    pub lambdas: Vec<f64>,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_min_lr_ratio")]
    pub min_lr_ratio: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_betas")]
    pub betas: [f64; 2],
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "d_total")]
    pub total_steps: usize,
    #[serde(default = "d_clip")]
    pub grad_clip: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Tokens per LM training row.
    #[serde(default = "d_seq")]
    pub seq_len: usize,
    #[serde(default)]
    pub label_smoothing: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_eval_every")]
    pub eval_every: usize,
    #[serde(default = "d_eval_batches")]
    pub eval_batches: usize,
    /// Held-out tail of the data used for validation.
    #[serde(default = "d_val_fraction")]
    pub val_fraction: f64,
    /// Steps between checkpoints (0: only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Adds elapsed seconds to every metric record (breaks byte-identical reruns).
    #[serde(default)]
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields default")
    }
}

impl TrainConfig {
    /// Loss weights for `g` granularities.
    pub fn lambdas(&self, g: usize) -> Result<Vec<f64>> {
        if self.lambdas.is_empty() {
            return Ok(vec![1.0 / g as f64; g]);
        }
        if self.lambdas.len() != g {
            return Err(Error::Config(format!("{} lambdas for {g} granularities", self.lambdas.len())));
        }
        if self.lambdas.iter().any(|l| l.is_nan() || *l < 0.0) {
            return Err(Error::Config(format!("lambdas {:?} must be non-negative", self.lambdas)));
        }
        Ok(self.lambdas.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [("lr", self.lr), ("eps", self.eps), ("grad_clip", self.grad_clip)];
        if let Some((k, v)) = pos.iter().find(|(_, v)| v.is_nan() || *v <= 0.0) {
            return Err(Error::Config(format!("{k} = {v} must be positive")));
        }
        if !(0.0..1.0).contains(&self.betas[0]) || !(0.0..1.0).contains(&self.betas[1]) {
            return Err(Error::Config(format!("betas {:?} outside [0, 1)", self.betas)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if self.batch_size == 0 || self.seq_len == 0 || self.total_steps == 0 {
            return Err(Error::Config("batch_size, seq_len and total_steps must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction {} outside (0, 1)", self.val_fraction)));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr`, then cosine decay to `lr * min_lr_ratio`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    let min_lr = cfg.lr * cfg.min_lr_ratio;
    if step < cfg.warmup_steps {
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps);
    if span == 0 {
        return min_lr;
    }
    let progress = (step - cfg.warmup_steps) as f64 / span as f64;
    min_lr + 0.5 * (cfg.lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales every gradient by `min(1, max_norm / ||g||)`; returns the scale.
pub fn clip_gradients<S: Scalar>(store: &mut ParamStore<S>, max_norm: f64) -> f64 {
    let norm = store.grad_sq_norm().sqrt();
    let scale = if norm > max_norm { max_norm / norm } else { 1.0 };
    if scale < 1.0 {
        let s: S = lit(scale);
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get_mut(id);
            if t.grad().is_some() {
                t.grad_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    scale
}

/// AdamW moments, shaped like the full (unsliced) parameters.
#[derive(Clone, Debug)]
pub struct OptimizerState<S> {
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub step: u64,
    decay: Vec<bool>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let zeros = |t: &Tensor<S>| vec![S::zero(); t.numel()];
        OptimizerState {
            m: store.iter().map(|(_, _, t)| zeros(t)).collect(),
            v: store.iter().map(|(_, _, t)| zeros(t)).collect(),
            step: 0,
            // matrices decay; norms, biases and per-head scalars do not
            decay: store.iter().map(|(_, _, t)| t.ndim() >= 2).collect(),
        }
    }

    pub fn allocated_scalars(&self) -> usize {
        self.m.iter().chain(&self.v).map(Vec::len).sum()
    }
}

/// One decoupled-weight-decay Adam step at learning rate `lr`.
pub fn adamw_update<S: Scalar>(store: &mut ParamStore<S>, state: &mut OptimizerState<S>, lr: f64, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let [b1, b2] = cfg.betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (b1s, b2s): (S, S) = (lit(b1), lit(b2));
    let (ob1, ob2): (S, S) = (lit(1.0 - b1), lit(1.0 - b2));
    let step_size: S = lit(lr / c1);
    let c2s: S = lit(c2);
    let eps: S = lit(cfg.eps);
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let decay: S = lit(if state.decay[k] { 1.0 - lr * cfg.weight_decay } else { 1.0 });
        let t = store.get_mut(id);
        let grad = t.grad().map(<[S]>::to_vec);
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let p = t.data_mut();
        for i in 0..p.len() {
            let g = grad.as_ref().map_or(S::zero(), |g| g[i]);
            m[i] = b1s * m[i] + ob1 * g;
            v[i] = b2s * v[i] + ob2 * g * g;
            let denom = (v[i] / c2s).sqrt() + eps;
            p[i] = p[i] * decay - step_size * m[i] / denom;
        }
    }
}

/// A training or evaluation batch.
#[derive(Clone, Debug)]
pub enum Batch<S> {
    /// `batch` rows of next-token pairs.
    Tokens {
        inputs: Vec<usize>,
        targets: Vec<usize>,
        batch: usize,
    },
    Images {
        images: Tensor<S>,
        labels: Vec<usize>,
    },
}

/// Mean cross-entropy of `model` at `gc` on `batch`, as a graph node.
pub fn loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    model: &ModelParams<S>,
    batch: &Batch<S>,
    gc: &GranularityConfig,
    smoothing: f64,
) -> Result<Var> {
    let mode = ScanMode::Chunked(DEFAULT_CHUNK);
    match batch {
        Batch::Tokens { inputs, targets, batch } => {
            let logits = model.lm_logits(g, inputs, *batch, gc, mode, None)?;
            let v = model.cfg.vocab_size;
            let flat = g.reshape(logits, vec![inputs.len(), v])?;
            g.cross_entropy(flat, targets, lit(smoothing))
        }
        Batch::Images { images, labels } => {
            let (_, logits) = model.vision_logits(g, images, gc, mode)?;
            g.cross_entropy(logits, labels, lit(smoothing))
        }
    }
}

/// Runs one forward and backward per granularity, adding `λ_i ∇L_i` into
/// the parameter gradients. Returns the unweighted losses.
pub fn accumulate_joint_gradients<S: Scalar>(
    model: &mut ModelParams<S>,
    batch: &Batch<S>,
    gcs: &[GranularityConfig],
    lambdas: &[f64],
    smoothing: f64,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(gcs.len());
    for (gc, &lambda) in gcs.iter().zip(lambdas) {
        let mut g = Graph::new();
        let loss = loss_graph(&mut g, model, batch, gc, smoothing).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("{msg} at granularity {:?}", gc.dims)),
            other => other,
        })?;
        let value = g.scalar_value(loss).to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {value} at granularity {:?}", gc.dims)));
        }
        let weighted = g.scale(loss, lit(lambda));
        g.backward_into(weighted, &mut model.store)?;
        losses.push(value);
    }
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub losses: Vec<f64>,
    pub joint: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// The uniform configurations for every trained granularity; a fixed-width
/// (extracted) model trains at its own widths.
pub fn trained_gcs<S>(model: &ModelParams<S>) -> Vec<GranularityConfig> {
    if !model.cfg.is_nested() {
        return vec![model.cfg.full_gc()];
    }
    model.cfg.granularities().iter().map(|&m| GranularityConfig::uniform(model.cfg.n_layers, m)).collect()
}

/// One joint step: accumulate all granularities, clip, update once, zero.
pub fn joint_loss_step<S: Scalar>(
    model: &mut ModelParams<S>,
    opt: &mut OptimizerState<S>,
    batch: &Batch<S>,
    cfg: &TrainConfig,
) -> Result<StepReport> {
    let gcs = trained_gcs(model);
    let lambdas = cfg.lambdas(gcs.len())?;
    model.store.zero_grad();
    let losses = accumulate_joint_gradients(model, batch, &gcs, &lambdas, cfg.label_smoothing)?;
    let grad_norm = model.store.grad_sq_norm().sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::Numeric(format!("non-finite gradient norm at step {}", opt.step)));
    }
    clip_gradients(&mut model.store, cfg.grad_clip);
    let lr = lr_schedule(opt.step as usize + 1, cfg);
    adamw_update(&mut model.store, opt, lr, cfg);
    model.store.zero_grad();
    let joint = losses.iter().zip(&lambdas).map(|(l, w)| l * w).sum();
    Ok(StepReport { losses, joint, lr, grad_norm })
}

/// Training data split into a sampled training part and a fixed tail.
pub enum TrainData {
    Text { tokens: Vec<u8>, split: usize },
    Images { data: ImageDataset, split: usize, norm: Normalization },
}

impl TrainData {
    pub fn text(tokens: Vec<u8>, val_fraction: f64) -> Result<Self> {
        let split = ((tokens.len() as f64) * (1.0 - val_fraction)).round() as usize;
        if split < 2 || tokens.len() - split < 2 {
            return Err(Error::Config(format!("corpus of {} bytes is too small to split", tokens.len())));
        }
        Ok(TrainData::Text { tokens, split })
    }

    pub fn images(data: ImageDataset, val_fraction: f64, norm: Normalization) -> Result<Self> {
        let split = ((data.len() as f64) * (1.0 - val_fraction)).round() as usize;
        if split == 0 || split == data.len() {
            return Err(Error::Config(format!("{} images are too few to split", data.len())));
        }
        Ok(TrainData::Images { data, split, norm })
    }

    fn windows<S: Scalar>(tokens: &[u8], starts: &[usize], len: usize) -> Batch<S> {
        let mut inputs = Vec::with_capacity(starts.len() * len);
        let mut targets = Vec::with_capacity(starts.len() * len);
        for &s in starts {
            inputs.extend(tokens[s..s + len].iter().map(|&b| b as usize));
            targets.extend(tokens[s + 1..s + len + 1].iter().map(|&b| b as usize));
        }
        Batch::Tokens { inputs, targets, batch: starts.len() }
    }

    pub fn sample<S: Scalar>(&self, rng: &mut ChaCha8Rng, cfg: &TrainConfig) -> Result<Batch<S>> {
        match self {
            TrainData::Text { tokens, split } => {
                let len = cfg.seq_len.min(split - 1);
                let starts: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..split - len)).collect();
                Ok(Self::windows(&tokens[..*split], &starts, len))
            }
            TrainData::Images { data, split, norm } => {
                let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..*split)).collect();
                Ok(Batch::Images { images: data.tensor(&idx, norm)?, labels: data.labels_at(&idx) })
            }
        }
    }

    /// The fixed validation batches: evenly spaced windows (text) or the
    /// whole held-out tail (images).
    pub fn validation<S: Scalar>(&self, cfg: &TrainConfig) -> Result<Vec<Batch<S>>> {
        match self {
            TrainData::Text { tokens, split } => {
                let val = &tokens[*split..];
                let len = cfg.seq_len.min(val.len() - 1);
                let n = cfg.eval_batches * cfg.batch_size;
                let room = val.len() - len - 1;
                let starts: Vec<usize> = (0..n).map(|i| if n > 1 { i * room / (n - 1) } else { 0 }).collect();
                Ok(starts.chunks(cfg.batch_size).map(|c| Self::windows(val, c, len)).collect())
            }
            TrainData::Images { data, split, norm } => {
                let idx: Vec<usize> = (*split..data.len()).collect();
                idx.chunks(cfg.batch_size.max(1))
                    .map(|c| Ok(Batch::Images { images: data.tensor(c, norm)?, labels: data.labels_at(c) }))
                    .collect()
            }
        }
    }
}

/// Mean loss (and accuracy for classifiers) of `model` at `gc`.
pub fn evaluate<S: Scalar>(
    model: &ModelParams<S>,
    batches: &[Batch<S>],
    gc: &GranularityConfig,
) -> Result<(f64, Option<f64>)> {
    gc.check(&model.cfg)?;
    if batches.is_empty() {
        return Err(Error::State("no evaluation batches".into()));
    }
    let (mut total, mut count, mut correct) = (0.0, 0usize, 0usize);
    for b in batches {
        let mut g = Graph::new();
        let (loss, n) = match b {
            Batch::Tokens { targets, .. } => (loss_graph(&mut g, model, b, gc, 0.0)?, targets.len()),
            Batch::Images { images, labels } => {
                let (_, logits) = model.vision_logits(&mut g, images, gc, ScanMode::Chunked(DEFAULT_CHUNK))?;
                let k = model.cfg.num_classes;
                for (row, &y) in g.value(logits).chunks(k).zip(labels) {
                    correct += usize::from(argmax(row) == y);
                }
                (g.cross_entropy(logits, labels, S::zero())?, labels.len())
            }
        };
        total += g.scalar_value(loss).to_f64_lossy() * n as f64;
        count += n;
    }
    let acc = (model.cfg.kind == ModelKind::Vision).then(|| correct as f64 / count as f64);
    Ok((total / count as f64, acc))
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub initial_val: Vec<f64>,
    pub final_val: Vec<f64>,
    pub final_accuracy: Option<Vec<f64>>,
}

/// Where and how often [`train`] writes checkpoints.
#[derive(Clone, Debug, Default)]
pub struct CheckpointPolicy {
    pub path: Option<PathBuf>,
}

/// Trains `model` for `cfg.total_steps` joint steps, validating every
/// trained granularity at step 0, every `eval_every` steps and at the end.
pub fn train<S: Scalar>(
    model: &mut ModelParams<S>,
    data: &TrainData,
    cfg: &TrainConfig,
    sink: &mut dyn MetricsSink,
    ckpt: &CheckpointPolicy,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let gcs = trained_gcs(model);
    cfg.lambdas(gcs.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(&model.store);
    let val = data.validation::<S>(cfg)?;
    let started = Instant::now();
    let wall = |rec: &mut serde_json::Value| {
        if cfg.log_wall_time {
            rec["wall_time"] = json!(started.elapsed().as_secs_f64());
        }
    };
    let mut summary = TrainSummary::default();
    let validate =
        |model: &ModelParams<S>, step: usize, sink: &mut dyn MetricsSink| -> Result<(Vec<f64>, Option<Vec<f64>>)> {
            let mut losses = Vec::new();
            let mut accs = Vec::new();
            for gc in &gcs {
                let (l, a) = evaluate(model, &val, gc)?;
                losses.push(l);
                accs.extend(a);
            }
            let accs = (!accs.is_empty()).then_some(accs);
            let mut rec =
                json!({"kind": "val", "step": step, "granularities": model.cfg.granularities(), "losses": losses});
            if let Some(a) = &accs {
                rec["accuracy"] = json!(a);
            }
            wall(&mut rec);
            sink.record(rec)?;
            Ok((losses, accs))
        };
    summary.initial_val = validate(model, 0, sink)?.0;
    for step in 1..=cfg.total_steps {
        let batch = data.sample::<S>(&mut rng, cfg)?;
        let rep = joint_loss_step(model, &mut opt, &batch, cfg)?;
        let mut rec = json!({
            "kind": "train",
            "step": step,
            "lr": rep.lr,
            "losses": rep.losses,
            "joint": rep.joint,
            "grad_norm": rep.grad_norm,
        });
        wall(&mut rec);
        sink.record(rec)?;
        let last = step == cfg.total_steps;
        if last || (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
            let (l, a) = validate(model, step, sink)?;
            summary.final_val = l;
            summary.final_accuracy = a;
        }
        if let Some(path) = &ckpt.path {
            if last || (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
                let meta = json!({"step": step, "val_losses": summary.final_val});
                save_checkpoint(model, &meta, path)?;
            }
        }
        summary.steps = step;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests;
