//! Elastic inference: Mix'n'Match granularity selection, standalone
//! extraction, generation, pareto sweeps and nearest-neighbour retrieval.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::block::resolve_slice;
use crate::error::{Error, Result};
use crate::model::{model_param_count_at, GranularityConfig, ModelConfig, ModelParams};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{argmax, evaluate, Batch};

/// One rejected layer of a granularity configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GcViolation {
    /// `None` when the configuration as a whole is malformed.
    pub layer: Option<usize>,
    pub message: String,
}

/// Checks every layer, reporting all violations.
pub fn validate_gc(cfg: &ModelConfig, gc: &GranularityConfig) -> std::result::Result<(), Vec<GcViolation>> {
    if gc.dims.len() != cfg.n_layers {
        return Err(vec![GcViolation {
            layer: None,
            message: format!("{} dims given for {} layers", gc.dims.len(), cfg.n_layers),
        }]);
    }
    let errs: Vec<_> = gc
        .dims
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| {
            resolve_slice(&cfg.block_config(i), m).err().map(|e| GcViolation { layer: Some(i), message: e.to_string() })
        })
        .collect();
    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}

/// Valid dimensions of layer `i` within `[lo, hi]`.
pub fn lattice(cfg: &ModelConfig, layer: usize, lo: usize, hi: usize) -> Vec<usize> {
    let bc = cfg.block_config(layer);
    (lo.max(1)..=hi.min(bc.width)).filter(|&m| resolve_slice(&bc, m).is_ok()).collect()
}

/// Random per-layer dimensions from the valid lattice between the
/// smallest trained granularity and `d_model`, nudged one lattice step at
/// a time until the mean width ratio is as close to `target` as the
/// lattice allows.
pub fn sample_gc(cfg: &ModelConfig, target: f64, seed: u64) -> Result<GranularityConfig> {
    let floor = cfg.granularities().into_iter().min().unwrap_or(1);
    sample_gc_between(cfg, target, floor, cfg.d_model, seed)
}

/// [`sample_gc`] restricted to dimensions in `[lo, hi]`.
pub fn sample_gc_between(cfg: &ModelConfig, target: f64, lo: usize, hi: usize, seed: u64) -> Result<GranularityConfig> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::Range(format!("target ratio {target} outside (0, 1]")));
    }
    let lats: Vec<Vec<usize>> = (0..cfg.n_layers).map(|i| lattice(cfg, i, lo, hi)).collect();
    if let Some(i) = lats.iter().position(Vec::is_empty) {
        return Err(Error::Range(format!("layer {i} has no valid dimension in [{lo}, {hi}]")));
    }
    let d = cfg.d_model as f64;
    let l = cfg.n_layers as f64;
    let ratio_of = |pos: &[usize]| pos.iter().zip(&lats).map(|(&p, lat)| lat[p] as f64).sum::<f64>() / (l * d);
    let min_ratio = ratio_of(&vec![0; lats.len()]);
    let max_ratio = ratio_of(&lats.iter().map(|v| v.len() - 1).collect::<Vec<_>>());
    if target < min_ratio - 0.05 || target > max_ratio + 0.05 {
        return Err(Error::Range(format!(
            "target ratio {target} outside the representable [{min_ratio:.4}, {max_ratio:.4}]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = lats.iter().map(|v| rng.random_range(0..v.len())).collect();
    let step_of = |i: usize, p: usize, up: bool| {
        let lat = &lats[i];
        if up {
            (lat[p + 1] - lat[p]) as f64 / (l * d)
        } else {
            (lat[p] - lat[p - 1]) as f64 / (l * d)
        }
    };
    loop {
        let r = ratio_of(&pos);
        let up = r < target;
        let movable: Vec<usize> = (0..pos.len())
            .filter(|&i| if up { pos[i] + 1 < lats[i].len() } else { pos[i] > 0 })
            .filter(|&i| (r - target).abs() > step_of(i, pos[i], up) / 2.0)
            .collect();
        if movable.is_empty() {
            break;
        }
        let w = WeightedIndex::new(vec![1u32; movable.len()]).expect("non-empty");
        let i = movable[w.sample(&mut rng)];
        if up {
            pos[i] += 1;
        } else {
            pos[i] -= 1;
        }
    }
    Ok(GranularityConfig { dims: pos.iter().zip(&lats).map(|(&p, lat)| lat[p]).collect() })
}

/// A candidate submodel with its cost estimates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubmodelSpec {
    pub gc: GranularityConfig,
    /// Total (embedding + non-embedding) parameters of the submodel.
    pub est_params: u64,
    /// Mean per-layer inner-width fraction, a proxy for FLOPs.
    pub est_flops_ratio: f64,
}

impl SubmodelSpec {
    pub fn new(cfg: &ModelConfig, gc: GranularityConfig) -> Result<Self> {
        let (e, n) = model_param_count_at(cfg, &gc)?;
        let est_flops_ratio = gc.ratio(cfg);
        Ok(SubmodelSpec { gc, est_params: e + n, est_flops_ratio })
    }
}

/// Copies the slices read at `gc` into a standalone model whose layers
/// are exactly as wide as `gc`.
pub fn extract_submodel<S: Scalar>(model: &ModelParams<S>, gc: &GranularityConfig) -> Result<ModelParams<S>> {
    gc.check(&model.cfg)?;
    let mut cfg = model.cfg.clone();
    cfg.layer_widths = Some(gc.dims.clone());
    cfg.granularities = Vec::new();
    let mut store = ParamStore::new();
    let block_ids: std::collections::HashSet<_> = model.layers.iter().flat_map(|p| p.ids()).collect();
    // keep the universal tensor order: top-level tensors, then layers
    for (id, name, t) in model.store.iter() {
        if !block_ids.contains(&id) {
            store.insert(name, t.clone())?;
        }
    }
    for (i, (p, &m)) in model.layers.iter().zip(&gc.dims).enumerate() {
        p.materialize(&model.store, m, &mut store, &format!("layers.{i}"))?;
    }
    ModelParams::from_store(cfg, reorder_like(&model.store, store)?)
}

/// Rebuilds `store` with its tensors in the order of `reference`.
fn reorder_like<S: Scalar>(reference: &ParamStore<S>, store: ParamStore<S>) -> Result<ParamStore<S>> {
    let mut out = ParamStore::new();
    for (_, name, _) in reference.iter() {
        let id = store.require(name)?;
        out.insert(name, store.get(id).clone())?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature { t: f64, seed: u64 },
}

/// Prefills `prompt` with the full-sequence path, then decodes one token
/// at a time through the recurrent step.
pub fn generate<S: Scalar>(
    model: &ModelParams<S>,
    prompt: &[usize],
    gc: &GranularityConfig,
    max_new: usize,
    mode: Sampling,
) -> Result<Vec<usize>> {
    gc.check(&model.cfg)?;
    if prompt.is_empty() {
        return Err(Error::Dimension("empty prompt".into()));
    }
    let mut out = prompt.to_vec();
    if max_new == 0 {
        return Ok(out);
    }
    let mut rng = match mode {
        Sampling::Temperature { t, seed } if t > 0.0 => Some((t, ChaCha8Rng::seed_from_u64(seed))),
        Sampling::Temperature { t, .. } => return Err(Error::Range(format!("temperature {t} must be positive"))),
        Sampling::Greedy => None,
    };
    let (mut logits, mut states) = model.lm_prefill(prompt, 1, gc)?;
    for k in 0..max_new {
        let row = logits.data();
        let next = match rng.as_mut() {
            None => argmax(row),
            Some((t, rng)) => {
                let mx = row.iter().map(|v| v.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = row.iter().map(|v| ((v.to_f64_lossy() - mx) / *t).exp()).collect();
                WeightedIndex::new(&w).map_err(|e| Error::Numeric(e.to_string()))?.sample(rng)
            }
        };
        out.push(next);
        if k + 1 < max_new {
            logits = model.lm_step(&[next], gc, &mut states)?;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub dims: Vec<usize>,
    pub ratio: f64,
    pub params: u64,
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

/// Evaluates every spec on the same batches; rows are sorted by ratio.
pub fn pareto_sweep<S: Scalar>(model: &ModelParams<S>, eval: &[Batch<S>], specs: &[SubmodelSpec]) -> Vec<SweepRow> {
    let mut rows: Vec<SweepRow> = specs
        .iter()
        .map(|s| {
            let (loss, accuracy, error) = match evaluate(model, eval, &s.gc) {
                Ok((l, a)) => (Some(l), a, None),
                Err(e) => (None, None, Some(e.to_string())),
            };
            SweepRow { dims: s.gc.dims.clone(), ratio: s.est_flops_ratio, params: s.est_params, loss, accuracy, error }
        })
        .collect();
    rows.sort_by(|a, b| a.ratio.total_cmp(&b.ratio));
    rows
}

/// L2-normalized database embeddings for cosine nearest-neighbour search.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    pub embeddings: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<usize>,
    pub gc: GranularityConfig,
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Builds an index from already computed embeddings `[n, dim]`.
    pub fn from_embeddings(emb: &[f64], dim: usize, labels: Vec<usize>, gc: GranularityConfig) -> Result<Self> {
        if dim == 0 || emb.len() != labels.len() * dim {
            return Err(Error::Dimension(format!("{} values for {} items of dim {dim}", emb.len(), labels.len())));
        }
        let mut embeddings = emb.to_vec();
        embeddings.chunks_mut(dim).for_each(normalize);
        Ok(RetrievalIndex { embeddings, dim, labels, gc })
    }

    /// Database index of the most cosine-similar item to every query row.
    pub fn nearest(&self, queries: &[f64]) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(Error::State("retrieval index is empty".into()));
        }
        if !queries.len().is_multiple_of(self.dim) {
            return Err(Error::Dimension(format!("query of {} values for dim {}", queries.len(), self.dim)));
        }
        Ok(queries
            .chunks(self.dim)
            .map(|q| {
                let mut q = q.to_vec();
                normalize(&mut q);
                let mut best = (0, f64::NEG_INFINITY);
                for (j, e) in self.embeddings.chunks(self.dim).enumerate() {
                    let s: f64 = q.iter().zip(e).map(|(a, b)| a * b).sum();
                    // strict comparison keeps the lowest index on ties
                    if s > best.1 {
                        best = (j, s);
                    }
                }
                best.0
            })
            .collect())
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// `[CLS]` embeddings of `images` at `gc`, in chunks of `batch`.
pub fn encode_images<S: Scalar>(
    model: &ModelParams<S>,
    images: &Tensor<S>,
    gc: &GranularityConfig,
    batch: usize,
) -> Result<Vec<f64>> {
    let n = images.shape().first().copied().unwrap_or(0);
    let per = images.numel() / n.max(1);
    let mut out = Vec::with_capacity(n * model.cfg.d_model);
    for start in (0..n).step_by(batch.max(1)) {
        let k = batch.max(1).min(n - start);
        let mut shape = images.shape().to_vec();
        shape[0] = k;
        let chunk = Tensor::new(shape, images.data()[start * per..(start + k) * per].to_vec())?;
        let (_, emb) = model.vision_forward(&chunk, gc)?;
        out.extend(emb.data().iter().map(|v| v.to_f64_lossy()));
    }
    Ok(out)
}

pub fn build_index<S: Scalar>(
    model: &ModelParams<S>,
    images: &Tensor<S>,
    labels: Vec<usize>,
    gc_db: &GranularityConfig,
) -> Result<RetrievalIndex> {
    if labels.is_empty() {
        return Err(Error::State("cannot index an empty database".into()));
    }
    let emb = encode_images(model, images, gc_db, 64)?;
    RetrievalIndex::from_embeddings(&emb, model.cfg.d_model, labels, gc_db.clone())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub neighbors: Vec<usize>,
    pub predicted: Vec<usize>,
    /// Fraction of queries whose predicted label equals the one obtained
    /// by encoding the same query at the database granularity.
    pub agreement: f64,
}

/// Encodes queries at `gc_query` and retrieves their nearest database items.
pub fn query_1nn<S: Scalar>(
    index: &RetrievalIndex,
    model: &ModelParams<S>,
    images: &Tensor<S>,
    gc_query: &GranularityConfig,
) -> Result<RetrievalResult> {
    let q = encode_images(model, images, gc_query, 64)?;
    let reference = if *gc_query == index.gc { q.clone() } else { encode_images(model, images, &index.gc, 64)? };
    index.retrieve(&q, &reference)
}

impl RetrievalIndex {
    /// Retrieves for `queries` and scores label agreement against the
    /// retrieval obtained with `reference` embeddings of the same items
    /// (typically the database encoder's own).
    pub fn retrieve(&self, queries: &[f64], reference: &[f64]) -> Result<RetrievalResult> {
        let neighbors = self.nearest(queries)?;
        let predicted: Vec<usize> = neighbors.iter().map(|&j| self.labels[j]).collect();
        let want: Vec<usize> = self.nearest(reference)?.iter().map(|&j| self.labels[j]).collect();
        if want.len() != predicted.len() {
            return Err(Error::Dimension(format!("{} queries vs {} references", predicted.len(), want.len())));
        }
        let same = predicted.iter().zip(&want).filter(|(a, b)| a == b).count();
        Ok(RetrievalResult { agreement: same as f64 / predicted.len().max(1) as f64, neighbors, predicted })
    }
}

#[cfg(test)]
mod tests;
