//! Stacks of MatMamba blocks: a byte/token decoder LM with tied embeddings
//! and a patch-sequence vision classifier with a suffix [CLS] token.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::block::{
    block_param_count, residual_forward, residual_step, resolve_slice, rmsnorm_rows, zero_state, BlockConfig,
    BlockParams, CountMode, RMS_EPS,
};
use crate::error::{Error, Result};
use crate::init::{Initializer, INIT_STD};
use crate::linalg::MatRef;
use crate::params::{ParamId, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::ssd::{ScanMode, StepState, DEFAULT_CHUNK};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lm,
    Vision,
}

fn default_kind() -> ModelKind {
    ModelKind::Lm
}
fn default_expand() -> usize {
    2
}
fn default_d_head() -> usize {
    64
}
fn default_d_state() -> usize {
    128
}
fn default_vocab() -> usize {
    256
}
fn default_patch() -> usize {
    4
}
fn default_image() -> usize {
    32
}
fn default_channels() -> usize {
    3
}
fn default_classes() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_kind")]
    pub kind: ModelKind,
    pub n_layers: usize,
    pub d_model: usize,
    #[serde(default = "default_expand")]
    pub expand: usize,
    #[serde(default = "default_d_head")]
    pub d_head: usize,
    #[serde(default = "default_d_state")]
    pub d_state: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default = "default_image")]
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// Nested dimensions trained jointly, largest first. Empty means
    /// `[d, d/2, d/4, d/8]`.
    #[serde(default)]
    pub granularities: Vec<usize>,
    /// Per-layer stored width for extracted (non-nested) models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_widths: Option<Vec<usize>>,
}

impl ModelConfig {
    pub fn lm(n_layers: usize, d_model: usize, vocab_size: usize) -> Self {
        ModelConfig {
            kind: ModelKind::Lm,
            n_layers,
            d_model,
            expand: 2,
            d_head: 64,
            d_state: 128,
            vocab_size,
            patch_size: default_patch(),
            image_size: default_image(),
            channels: default_channels(),
            num_classes: default_classes(),
            granularities: Vec::new(),
            layer_widths: None,
        }
    }

    pub fn vision(n_layers: usize, d_model: usize, patch_size: usize, image_size: usize, num_classes: usize) -> Self {
        ModelConfig { kind: ModelKind::Vision, patch_size, image_size, num_classes, ..Self::lm(n_layers, d_model, 256) }
    }

    pub fn with_heads(mut self, d_head: usize, d_state: usize) -> Self {
        self.d_head = d_head;
        self.d_state = d_state;
        self
    }

    /// Named configurations; the full-size ones are used for counting.
    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "lm-130m" => Self::lm(24, 768, 50_280),
            "lm-370m" => Self::lm(48, 1024, 50_280),
            "lm-790m" => Self::lm(48, 1536, 50_280),
            "lm-1.4b" => Self::lm(48, 2048, 50_280),
            "vision-135m" => Self::vision(20, 1024, 16, 224, 1000),
            "vision-35m" => Self::vision(20, 512, 16, 224, 1000).with_heads(32, 128),
            "lm-desk" => Self::lm(4, 128, 256).with_heads(32, 32),
            "vision-desk" => Self::vision(4, 64, 4, 32, 10).with_heads(16, 16),
            "lm-tiny" => Self::lm(2, 32, 16).with_heads(8, 8),
            "vision-tiny" => Self::vision(2, 32, 4, 8, 4).with_heads(8, 8),
            _ => return Err(Error::Config(format!("unknown preset {name:?}"))),
        })
    }

    pub const PRESETS: [&'static str; 10] = [
        "lm-130m",
        "lm-370m",
        "lm-790m",
        "lm-1.4b",
        "vision-135m",
        "vision-35m",
        "lm-desk",
        "vision-desk",
        "lm-tiny",
        "vision-tiny",
    ];

    /// The trained granularities with defaults filled in.
    pub fn granularities(&self) -> Vec<usize> {
        if !self.granularities.is_empty() || self.layer_widths.is_some() {
            return self.granularities.clone();
        }
        let d = self.d_model;
        vec![d, d / 2, d / 4, d / 8]
    }

    /// Fills defaults in place so a saved config is fully explicit.
    pub fn materialize_defaults(&mut self) {
        self.granularities = self.granularities();
    }

    pub fn width(&self, layer: usize) -> usize {
        self.layer_widths.as_ref().map_or(self.d_model, |w| w[layer])
    }

    pub fn block_config(&self, layer: usize) -> BlockConfig {
        BlockConfig::new(self.d_model, self.expand, self.d_head, self.d_state).with_width(self.width(layer))
    }

    pub fn is_nested(&self) -> bool {
        self.layer_widths.is_none()
    }

    /// The widest granularity every layer can run at.
    pub fn full_gc(&self) -> GranularityConfig {
        GranularityConfig { dims: (0..self.n_layers).map(|i| self.width(i)).collect() }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 {
            return Err(Error::Config("n_layers and d_model must be positive".into()));
        }
        match self.kind {
            ModelKind::Lm if self.vocab_size == 0 => return Err(Error::Config("vocab_size must be positive".into())),
            ModelKind::Vision
                if self.patch_size == 0 || self.channels == 0 || self.num_classes == 0 || self.image_size == 0 =>
            {
                return Err(Error::Config("vision sizes must be positive".into()))
            }
            ModelKind::Vision if !self.image_size.is_multiple_of(self.patch_size) => {
                return Err(Error::Config(format!(
                    "image_size {} not divisible by patch_size {}",
                    self.image_size, self.patch_size
                )))
            }
            _ => {}
        }
        if let Some(w) = &self.layer_widths {
            if w.len() != self.n_layers {
                return Err(Error::Config(format!("{} layer widths for {} layers", w.len(), self.n_layers)));
            }
        }
        for i in 0..self.n_layers {
            let bc = self.block_config(i);
            bc.validate()?;
            resolve_slice(&bc, bc.width).map_err(|e| Error::Config(format!("layer {i}: {e}")))?;
        }
        let gs = self.granularities();
        if self.is_nested() {
            if gs.first() != Some(&self.d_model) {
                return Err(Error::Config(format!("granularities {gs:?} must start at d_model {}", self.d_model)));
            }
            if gs.windows(2).any(|w| w[1] >= w[0]) {
                return Err(Error::Config(format!("granularities {gs:?} must be strictly decreasing")));
            }
            for &m in &gs {
                resolve_slice(&self.block_config(0), m).map_err(|e| Error::Config(format!("granularity {m}: {e}")))?;
            }
        }
        Ok(())
    }
}

/// One Matryoshka dimension per layer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GranularityConfig {
    pub dims: Vec<usize>,
}

impl GranularityConfig {
    pub fn uniform(n_layers: usize, m: usize) -> Self {
        GranularityConfig { dims: vec![m; n_layers] }
    }

    /// Mean of `d_i / d_inner` over layers relative to `cfg`'s full width.
    pub fn ratio(&self, cfg: &ModelConfig) -> f64 {
        self.dims.iter().map(|m| *m as f64 / cfg.d_model as f64).sum::<f64>() / self.dims.len() as f64
    }

    /// Checks the layer count and every layer's dimension.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.dims.len() != cfg.n_layers {
            return Err(Error::InvalidGranularity(format!(
                "{} dims given for {} layers",
                self.dims.len(),
                cfg.n_layers
            )));
        }
        for (i, &m) in self.dims.iter().enumerate() {
            resolve_slice(&cfg.block_config(i), m).map_err(|e| match e {
                Error::Range(msg) => Error::InvalidGranularity(format!("layer {i}: {msg}")),
                Error::InvalidGranularity(msg) => Error::InvalidGranularity(format!("layer {i}: {msg}")),
                other => other,
            })?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionParams {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub cls_token: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// A model's parameters and the handles into them.
#[derive(Clone, Debug)]
pub struct ModelParams<S> {
    pub cfg: ModelConfig,
    pub store: ParamStore<S>,
    /// LM token embedding, also the output projection.
    pub embed: Option<ParamId>,
    pub vision: Option<VisionParams>,
    pub layers: Vec<BlockParams>,
    pub final_norm: ParamId,
}

pub fn init_params<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<S>> {
    cfg.validate()?;
    let mut init = Initializer::new(seed);
    let mut store = ParamStore::new();
    let d = cfg.d_model;
    let (embed, vision) = match cfg.kind {
        ModelKind::Lm => (Some(store.insert("embed", init.trunc_normal(vec![cfg.vocab_size, d], INIT_STD))?), None),
        ModelKind::Vision => {
            let patch_w = store.insert("patch_w", init.trunc_normal(vec![d, cfg.patch_dim()], INIT_STD))?;
            let patch_b = store.insert("patch_b", Tensor::zeros(vec![d]))?;
            let cls_token = store.insert("cls_token", init.trunc_normal(vec![d], INIT_STD))?;
            (None, Some((patch_w, patch_b, cls_token)))
        }
    };
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        layers.push(BlockParams::init(&mut store, &format!("layers.{i}"), &cfg.block_config(i), &mut init)?);
    }
    let final_norm = store.insert("final_norm", Tensor::ones(vec![d]))?;
    let vision = match vision {
        Some((patch_w, patch_b, cls_token)) => Some(VisionParams {
            patch_w,
            patch_b,
            cls_token,
            head_w: store.insert("head_w", init.trunc_normal(vec![cfg.num_classes, d], INIT_STD))?,
            head_b: store.insert("head_b", Tensor::zeros(vec![cfg.num_classes]))?,
        }),
        None => None,
    };
    Ok(ModelParams { cfg: cfg.clone(), store, embed, vision, layers, final_norm })
}

/// Expected names and shapes of every top-level (non-block) tensor.
fn top_shapes(cfg: &ModelConfig) -> Vec<(&'static str, Vec<usize>)> {
    let d = cfg.d_model;
    match cfg.kind {
        ModelKind::Lm => vec![("embed", vec![cfg.vocab_size, d]), ("final_norm", vec![d])],
        ModelKind::Vision => vec![
            ("patch_w", vec![d, cfg.patch_dim()]),
            ("patch_b", vec![d]),
            ("cls_token", vec![d]),
            ("final_norm", vec![d]),
            ("head_w", vec![cfg.num_classes, d]),
            ("head_b", vec![cfg.num_classes]),
        ],
    }
}

impl<S: Scalar> ModelParams<S> {
    /// Binds a loaded store to `cfg`, rejecting missing, misshapen or
    /// unexpected tensors.
    pub fn from_store(cfg: ModelConfig, store: ParamStore<S>) -> Result<Self> {
        cfg.validate()?;
        let mut expected = 0;
        let mut top = std::collections::HashMap::new();
        for (name, shape) in top_shapes(&cfg) {
            let id = store.require(name)?;
            if store.get(id).shape() != shape.as_slice() {
                return Err(Error::Schema(format!("{name}: expected {shape:?}, found {:?}", store.get(id).shape())));
            }
            top.insert(name, id);
            expected += 1;
        }
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            layers.push(BlockParams::bind(&store, &format!("layers.{i}"), &cfg.block_config(i))?);
            expected += layers[i].ids().len();
        }
        if store.len() != expected {
            return Err(Error::Schema(format!("{} tensors stored, {expected} expected", store.len())));
        }
        let vision = match cfg.kind {
            ModelKind::Vision => Some(VisionParams {
                patch_w: top["patch_w"],
                patch_b: top["patch_b"],
                cls_token: top["cls_token"],
                head_w: top["head_w"],
                head_b: top["head_b"],
            }),
            ModelKind::Lm => None,
        };
        Ok(ModelParams { embed: top.get("embed").copied(), vision, layers, final_norm: top["final_norm"], cfg, store })
    }

    pub fn num_params(&self) -> u64 {
        self.store.num_elements() as u64
    }

    fn run_layers(
        &self,
        g: &mut Graph<S>,
        mut h: Var,
        gc: &GranularityConfig,
        mode: ScanMode,
        mut capture: Option<&mut Vec<StepState<S>>>,
    ) -> Result<Var> {
        gc.check(&self.cfg)?;
        if let Some(c) = capture.as_deref_mut() {
            c.clear();
        }
        for (p, &m) in self.layers.iter().zip(&gc.dims) {
            match capture.as_deref_mut() {
                Some(states) => {
                    let mut st = zero_state(&p.cfg, m, g.shape(h)[0])?;
                    h = residual_forward(g, &self.store, p, h, m, mode, Some(&mut st))?;
                    states.push(st);
                }
                None => h = residual_forward(g, &self.store, p, h, m, mode, None)?,
            }
        }
        Ok(h)
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.cfg.kind != kind {
            return Err(Error::Config(format!("operation needs a {kind:?} model, got {:?}", self.cfg.kind)));
        }
        Ok(())
    }

    /// LM logits `[b, l, V]` as a graph node; `tokens` is `b` rows of `l` ids.
    pub fn lm_logits(
        &self,
        g: &mut Graph<S>,
        tokens: &[usize],
        batch: usize,
        gc: &GranularityConfig,
        mode: ScanMode,
        capture: Option<&mut Vec<StepState<S>>>,
    ) -> Result<Var> {
        self.expect_kind(ModelKind::Lm)?;
        if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
            return Err(Error::Dimension(format!("{} tokens do not split into {batch} rows", tokens.len())));
        }
        let l = tokens.len() / batch;
        let d = self.cfg.d_model;
        let embed = g.param(&self.store, self.embed.expect("lm embed"));
        let h = g.gather_rows(embed, tokens)?;
        let h = g.reshape(h, vec![batch, l, d])?;
        let h = self.run_layers(g, h, gc, mode, capture)?;
        let w = g.param(&self.store, self.final_norm);
        let h = g.rmsnorm(h, w, lit(RMS_EPS))?;
        g.linear(h, embed)
    }

    /// `[CLS]` embedding `[b, d]` (after the final norm) and class logits
    /// `[b, classes]` as graph nodes.
    pub fn vision_logits(
        &self,
        g: &mut Graph<S>,
        images: &Tensor<S>,
        gc: &GranularityConfig,
        mode: ScanMode,
    ) -> Result<(Var, Var)> {
        self.expect_kind(ModelKind::Vision)?;
        let vp = self.vision.as_ref().expect("vision params");
        let patches = patchify(images, self.cfg.patch_size)?;
        let (b, np) = (patches.shape()[0], patches.shape()[1]);
        if patches.shape()[2] != self.cfg.patch_dim() {
            return Err(Error::Dimension(format!(
                "images have {} channels, model expects {}",
                images.shape()[3],
                self.cfg.channels
            )));
        }
        let d = self.cfg.d_model;
        let x = g.input(&patches);
        let w = g.param(&self.store, vp.patch_w);
        let bias = g.param(&self.store, vp.patch_b);
        let h = g.linear(x, w)?;
        let h = g.add(h, bias)?;
        let zeros = g.input_owned(vec![b, 1, d], vec![S::zero(); b * d])?;
        let cls = g.param(&self.store, vp.cls_token);
        let cls = g.add(zeros, cls)?;
        let h = g.concat(&[h, cls], 1)?;
        let h = self.run_layers(g, h, gc, mode, None)?;
        let last = g.narrow(h, 1, np, 1)?;
        let last = g.reshape(last, vec![b, d])?;
        let nw = g.param(&self.store, self.final_norm);
        let emb = g.rmsnorm(last, nw, lit(RMS_EPS))?;
        let hw = g.param(&self.store, vp.head_w);
        let hb = g.param(&self.store, vp.head_b);
        let logits = g.linear(emb, hw)?;
        let logits = g.add(logits, hb)?;
        Ok((emb, logits))
    }

    /// Logits `[b, l, V]` for `tokens` (`b` rows of equal length).
    pub fn lm_forward(&self, tokens: &[usize], batch: usize, gc: &GranularityConfig) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let y = self.lm_logits(&mut g, tokens, batch, gc, ScanMode::Chunked(DEFAULT_CHUNK), None)?;
        Ok(g.tensor(y))
    }

    /// `(logits [b, classes], cls_embedding [b, d])` for `images: [b, H, W, C]`.
    pub fn vision_forward(&self, images: &Tensor<S>, gc: &GranularityConfig) -> Result<(Tensor<S>, Tensor<S>)> {
        let mut g = Graph::new();
        let (emb, logits) = self.vision_logits(&mut g, images, gc, ScanMode::Chunked(DEFAULT_CHUNK))?;
        Ok((g.tensor(logits), g.tensor(emb)))
    }

    /// Runs the prompt through the full-sequence path and returns the
    /// last-position logits `[b, V]` plus the per-layer recurrent state.
    pub fn lm_prefill(
        &self,
        tokens: &[usize],
        batch: usize,
        gc: &GranularityConfig,
    ) -> Result<(Tensor<S>, Vec<StepState<S>>)> {
        let mut g = Graph::new();
        let mut states = Vec::new();
        let y = self.lm_logits(&mut g, tokens, batch, gc, ScanMode::Chunked(DEFAULT_CHUNK), Some(&mut states))?;
        let l = tokens.len() / batch;
        let v = self.cfg.vocab_size;
        let vals = g.value(y);
        let mut last = Vec::with_capacity(batch * v);
        for b in 0..batch {
            last.extend_from_slice(&vals[(b * l + l - 1) * v..(b * l + l) * v]);
        }
        Ok((Tensor::new(vec![batch, v], last)?, states))
    }

    /// One decoding step: `tokens` holds one id per batch row.
    pub fn lm_step(&self, tokens: &[usize], gc: &GranularityConfig, states: &mut [StepState<S>]) -> Result<Tensor<S>> {
        self.expect_kind(ModelKind::Lm)?;
        gc.check(&self.cfg)?;
        if states.len() != self.cfg.n_layers {
            return Err(Error::State(format!("{} layer states for {} layers", states.len(), self.cfg.n_layers)));
        }
        let (d, v) = (self.cfg.d_model, self.cfg.vocab_size);
        let table = self.store.get(self.embed.expect("lm embed")).data();
        let mut h = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t >= v {
                return Err(Error::Index(format!("token {t} outside vocabulary of {v}")));
            }
            h.extend_from_slice(&table[t * d..(t + 1) * d]);
        }
        let mut h = Tensor::new(vec![tokens.len(), d], h)?;
        for ((p, &m), st) in self.layers.iter().zip(&gc.dims).zip(states.iter_mut()) {
            h = residual_step(&self.store, p, &h, m, st)?;
        }
        let mut h = h.into_data();
        rmsnorm_rows(&mut h, self.store.get(self.final_norm).data());
        let logits = crate::block::linear_rows(&h, tokens.len(), MatRef::new(table, v, d));
        Tensor::new(vec![tokens.len(), v], logits)
    }
}

/// `[b, H, W, C]` into `[b, (H/p)(W/p), p*p*C]`, patches in row-major order,
/// each flattened as (row, col, channel).
pub fn patchify<S: Scalar>(images: &Tensor<S>, p: usize) -> Result<Tensor<S>> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("images must be [b, H, W, C], got {s:?}")));
    }
    let (b, hh, ww, c) = (s[0], s[1], s[2], s[3]);
    if p == 0 || hh % p != 0 || ww % p != 0 {
        return Err(Error::Dimension(format!("image {hh}x{ww} not divisible into {p}x{p} patches")));
    }
    let (ph, pw) = (hh / p, ww / p);
    let x = images.data();
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..b {
        for py in 0..ph {
            for px in 0..pw {
                for r in 0..p {
                    let row = ((bi * hh + py * p + r) * ww + px * p) * c;
                    out.extend_from_slice(&x[row..row + p * c]);
                }
            }
        }
    }
    Tensor::new(vec![b, ph * pw, p * p * c], out)
}

/// `(embed, non_embed)` learnable parameter counts of `cfg` at its stored
/// widths. For vision models `embed` is the patch projection and its bias.
pub fn model_param_count(cfg: &ModelConfig) -> Result<(u64, u64)> {
    model_param_count_at(cfg, &cfg.full_gc())
}

/// Counts for the submodel that runs `cfg` at `gc`.
pub fn model_param_count_at(cfg: &ModelConfig, gc: &GranularityConfig) -> Result<(u64, u64)> {
    gc.check(cfg)?;
    let d = cfg.d_model as u64;
    let mut layers = 0u64;
    for (i, &m) in gc.dims.iter().enumerate() {
        layers += block_param_count(&cfg.block_config(i), m, CountMode::Full)?;
    }
    Ok(match cfg.kind {
        ModelKind::Lm => (cfg.vocab_size as u64 * d, layers + d),
        ModelKind::Vision => {
            let embed = cfg.patch_dim() as u64 * d + d;
            let cls = d;
            let head = cfg.num_classes as u64 * (d + 1);
            (embed, layers + cls + d + head)
        }
    })
}

#[cfg(test)]
mod tests;
