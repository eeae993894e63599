//! The MatMamba block: a Mamba2 mixer whose inner-width dependent
//! parameters are read through prefix slices, so every smaller block is a
//! literal sub-block of the larger one.
//!
//! For a Matryoshka dimension `m` the block uses `d_i = expand * m` inner
//! channels and `h_i = d_i / d_head` heads:
//!
//! ```text
//! z, x, B, C, dt = u @ [W_z[:d_i]; W_x[:d_i]; W_B; W_C; W_dt[:h_i]]^T
//! x, B, C        = silu(conv([W_conv_x[:d_i]; W_conv_BC], [x; B; C]))
//! y              = scan(x, dt, A[:h_i], B, C, D[:h_i])
//! out            = rmsnorm(y * silu(z), norm[:d_i]) @ W_out[:, :d_i]^T
//! ```

use serde::{Deserialize, Serialize};

use crate::autograd::{silu, Graph, Var};
use crate::error::{Error, Result};
use crate::init::{Initializer, INIT_STD};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::ssd::{self, ScanMode, SsmVars, StepParams, StepState, CONV_KERNEL};
use crate::tensor::Tensor;

pub const RMS_EPS: f64 = 1e-5;

fn default_expand() -> usize {
    2
}
fn default_d_head() -> usize {
    64
}
fn default_d_state() -> usize {
    128
}

/// Static hyperparameters of one block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub d_model: usize,
    #[serde(default = "default_expand")]
    pub expand: usize,
    #[serde(default = "default_d_head")]
    pub d_head: usize,
    #[serde(default = "default_d_state")]
    pub d_state: usize,
    /// Largest Matryoshka dimension stored in this block; `d_model` for a
    /// universal block, smaller for an extracted one.
    pub width: usize,
}

impl BlockConfig {
    pub fn new(d_model: usize, expand: usize, d_head: usize, d_state: usize) -> Self {
        BlockConfig { d_model, expand, d_head, d_state, width: d_model }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.width
    }

    pub fn n_heads(&self) -> usize {
        self.d_inner() / self.d_head
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.expand == 0 || self.d_head == 0 || self.d_state == 0 {
            return Err(Error::Config(format!("block dimensions must be positive: {self:?}")));
        }
        if self.width == 0 || self.width > self.d_model {
            return Err(Error::Config(format!("block width {} outside (0, {}]", self.width, self.d_model)));
        }
        if !self.d_inner().is_multiple_of(self.d_head) {
            return Err(Error::Config(format!(
                "d_inner {} is not a multiple of d_head {}",
                self.d_inner(),
                self.d_head
            )));
        }
        Ok(())
    }
}

/// Inner sizes of the sub-block selected by a Matryoshka dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SliceDims {
    pub m: usize,
    pub d_inner: usize,
    pub heads: usize,
}

/// Inner width and head count for dimension `m`.
pub fn resolve_slice(cfg: &BlockConfig, m: usize) -> Result<SliceDims> {
    if m == 0 || m > cfg.width {
        return Err(Error::Range(format!("granularity {m} outside (0, {}]", cfg.width)));
    }
    let d_inner = cfg.expand * m;
    if !d_inner.is_multiple_of(cfg.d_head) {
        return Err(Error::InvalidGranularity(format!(
            "expand*m = {d_inner} is not a multiple of d_head {}",
            cfg.d_head
        )));
    }
    Ok(SliceDims { m, d_inner, heads: d_inner / cfg.d_head })
}

/// Handles of one block's parameters inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub cfg: BlockConfig,
    pub w_z: ParamId,
    pub w_x: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub w_dt: ParamId,
    pub dt_bias: ParamId,
    pub a_log: ParamId,
    pub d: ParamId,
    pub w_conv_x: ParamId,
    pub w_conv_bc: ParamId,
    pub conv_bias_x: ParamId,
    pub conv_bias_bc: ParamId,
    pub inner_norm_w: ParamId,
    pub pre_norm_w: ParamId,
    pub w_out: ParamId,
}

/// Tensor names (relative to the block prefix) and their shapes.
pub fn block_tensor_shapes(cfg: &BlockConfig) -> Vec<(&'static str, Vec<usize>)> {
    let (d, di, n, h) = (cfg.d_model, cfg.d_inner(), cfg.d_state, cfg.n_heads());
    vec![
        ("w_z", vec![di, d]),
        ("w_x", vec![di, d]),
        ("w_b", vec![n, d]),
        ("w_c", vec![n, d]),
        ("w_dt", vec![h, d]),
        ("dt_bias", vec![h]),
        ("a_log", vec![h]),
        ("d", vec![h]),
        ("w_conv_x", vec![di, CONV_KERNEL]),
        ("w_conv_bc", vec![2 * n, CONV_KERNEL]),
        ("conv_bias_x", vec![di]),
        ("conv_bias_bc", vec![2 * n]),
        ("inner_norm_w", vec![di]),
        ("pre_norm_w", vec![d]),
        ("w_out", vec![d, di]),
    ]
}

/// Axis along which each tensor is sliced, or `None` when it is shared
/// by every granularity.
fn slice_axis(name: &str) -> Option<usize> {
    match name {
        "w_z" | "w_x" | "w_dt" | "dt_bias" | "a_log" | "d" | "w_conv_x" | "conv_bias_x" | "inner_norm_w" => Some(0),
        "w_out" => Some(1),
        _ => None,
    }
}

fn is_head_indexed(name: &str) -> bool {
    matches!(name, "w_dt" | "dt_bias" | "a_log" | "d")
}

/// Portion of a stored tensor read at some granularity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SliceRegion {
    pub id: ParamId,
    /// `None` for tensors read whole.
    pub axis: Option<usize>,
    pub len: usize,
}

impl BlockParams {
    /// Registers freshly initialized block tensors under `prefix`.
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        cfg: &BlockConfig,
        init: &mut Initializer,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut ids = Vec::new();
        for (name, shape) in block_tensor_shapes(cfg) {
            let t = match name {
                "dt_bias" => init.dt_bias(shape[0]),
                "a_log" => init.a_log(shape[0]),
                "d" | "inner_norm_w" | "pre_norm_w" => Tensor::ones(shape),
                "conv_bias_x" | "conv_bias_bc" => Tensor::zeros(shape),
                // depthwise filters: fan-in is the kernel width
                "w_conv_x" | "w_conv_bc" => {
                    let bound = 1.0 / (CONV_KERNEL as f64).sqrt();
                    init.uniform(shape, -bound, bound)
                }
                _ => init.trunc_normal(shape, INIT_STD),
            };
            ids.push(store.insert(format!("{prefix}.{name}"), t)?);
        }
        Ok(Self::from_ids(cfg.clone(), &ids))
    }

    /// Looks up an existing block under `prefix`, checking shapes.
    pub fn bind<S: Scalar>(store: &ParamStore<S>, prefix: &str, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let mut ids = Vec::new();
        for (name, shape) in block_tensor_shapes(cfg) {
            let full = format!("{prefix}.{name}");
            let id = store.require(&full)?;
            if store.get(id).shape() != shape.as_slice() {
                return Err(Error::Schema(format!(
                    "{full}: expected shape {shape:?}, found {:?}",
                    store.get(id).shape()
                )));
            }
            ids.push(id);
        }
        Ok(Self::from_ids(cfg.clone(), &ids))
    }

    fn from_ids(cfg: BlockConfig, ids: &[ParamId]) -> Self {
        BlockParams {
            cfg,
            w_z: ids[0],
            w_x: ids[1],
            w_b: ids[2],
            w_c: ids[3],
            w_dt: ids[4],
            dt_bias: ids[5],
            a_log: ids[6],
            d: ids[7],
            w_conv_x: ids[8],
            w_conv_bc: ids[9],
            conv_bias_x: ids[10],
            conv_bias_bc: ids[11],
            inner_norm_w: ids[12],
            pre_norm_w: ids[13],
            w_out: ids[14],
        }
    }

    pub fn ids(&self) -> [ParamId; 15] {
        [
            self.w_z,
            self.w_x,
            self.w_b,
            self.w_c,
            self.w_dt,
            self.dt_bias,
            self.a_log,
            self.d,
            self.w_conv_x,
            self.w_conv_bc,
            self.conv_bias_x,
            self.conv_bias_bc,
            self.inner_norm_w,
            self.pre_norm_w,
            self.w_out,
        ]
    }

    /// Region of every stored tensor read at granularity `m`.
    pub fn slice_plan(&self, m: usize) -> Result<Vec<(&'static str, SliceRegion)>> {
        let dims = resolve_slice(&self.cfg, m)?;
        Ok(block_tensor_shapes(&self.cfg)
            .into_iter()
            .zip(self.ids())
            .map(|((name, shape), id)| {
                let axis = slice_axis(name);
                let len = match axis {
                    Some(_) if is_head_indexed(name) => dims.heads,
                    Some(_) => dims.d_inner,
                    None => shape.iter().product(),
                };
                (name, SliceRegion { id, axis, len })
            })
            .collect())
    }

    /// Copies the prefix slices used at `m` into `dst` as a standalone
    /// block of width `m`.
    pub fn materialize<S: Scalar>(
        &self,
        src: &ParamStore<S>,
        m: usize,
        dst: &mut ParamStore<S>,
        prefix: &str,
    ) -> Result<Self> {
        let cfg = self.cfg.clone().with_width(m);
        let mut ids = Vec::new();
        for (name, region) in self.slice_plan(m)? {
            let t = src.get(region.id);
            let t = match region.axis {
                Some(axis) => t.prefix_slice(axis, region.len)?,
                None => t.clone(),
            };
            ids.push(dst.insert(format!("{prefix}.{name}"), t)?);
        }
        Ok(Self::from_ids(cfg, &ids))
    }
}

/// Which tensors a parameter count includes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountMode {
    /// The ten weight tensors of the block, without norms or biases, with
    /// the shared B/C convolution filter tallied once per channel.
    WeightsOnly,
    /// Every stored scalar, including the pre-norm of the residual stack.
    Full,
}

/// Learnable parameters of the sub-block at granularity `m`.
pub fn block_param_count(cfg: &BlockConfig, m: usize, mode: CountMode) -> Result<u64> {
    let s = resolve_slice(cfg, m)?;
    let (d, n) = (cfg.d_model as u64, cfg.d_state as u64);
    let (di, h) = (s.d_inner as u64, s.heads as u64);
    let k = CONV_KERNEL as u64;
    let weights = 2 * di * d + 2 * n * d + h * d + 2 * h + di * k + d * di;
    Ok(match mode {
        CountMode::WeightsOnly => weights + 2 * n,
        CountMode::Full => {
            let conv_bc = 2 * n * k;
            let norms = d + di;
            let biases = di + 2 * n + h;
            weights + conv_bc + norms + biases
        }
    })
}

/// The block mixer at granularity `m`: `u: [b, l, d_model]` to the same shape.
pub fn block_forward<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    p: &BlockParams,
    u: Var,
    m: usize,
) -> Result<Var> {
    block_forward_with(g, store, p, u, m, ScanMode::Chunked(ssd::DEFAULT_CHUNK), None)
}

/// [`block_forward`] with an explicit scan mode, optionally recording the
/// recurrent state left after the last position.
pub fn block_forward_with<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    p: &BlockParams,
    u: Var,
    m: usize,
    mode: ScanMode,
    capture: Option<&mut StepState<S>>,
) -> Result<Var> {
    let cfg = &p.cfg;
    let dims = resolve_slice(cfg, m)?;
    let su = g.shape(u).to_vec();
    if su.len() != 3 || su[2] != cfg.d_model {
        return Err(Error::Dimension(format!("block input must be [b, l, {}], got {su:?}", cfg.d_model)));
    }
    let (b, l) = (su[0], su[1]);
    let (di, hi, n, ph) = (dims.d_inner, dims.heads, cfg.d_state, cfg.d_head);

    let param = |g: &mut Graph<S>, id: ParamId, axis: usize, len: usize| -> Result<Var> {
        let v = g.param(store, id);
        g.prefix_slice(v, axis, len)
    };
    let w_z = param(g, p.w_z, 0, di)?;
    let w_x = param(g, p.w_x, 0, di)?;
    let w_b = g.param(store, p.w_b);
    let w_c = g.param(store, p.w_c);
    let w_dt = param(g, p.w_dt, 0, hi)?;
    let w_in = g.concat(&[w_z, w_x, w_b, w_c, w_dt], 0)?;
    let zxbcdt = g.linear(u, w_in)?;

    let z = g.narrow(zxbcdt, 2, 0, di)?;
    let xbc = g.narrow(zxbcdt, 2, di, di + 2 * n)?;
    let dt_raw = g.narrow(zxbcdt, 2, 2 * di + 2 * n, hi)?;

    let conv_x = param(g, p.w_conv_x, 0, di)?;
    let conv_bc = g.param(store, p.w_conv_bc);
    let conv_w = g.concat(&[conv_x, conv_bc], 0)?;
    let bias_x = param(g, p.conv_bias_x, 0, di)?;
    let bias_bc = g.param(store, p.conv_bias_bc);
    let conv_b = g.concat(&[bias_x, bias_bc], 0)?;
    let conv = g.causal_conv1d(xbc, conv_w, conv_b)?;
    let xbc_act = g.silu(conv);

    let x = g.narrow(xbc_act, 2, 0, di)?;
    let x = g.reshape(x, vec![b, l, hi, ph])?;
    let bm = g.narrow(xbc_act, 2, di, n)?;
    let cm = g.narrow(xbc_act, 2, di + n, n)?;
    let dt_bias = param(g, p.dt_bias, 0, hi)?;
    let a_log = param(g, p.a_log, 0, hi)?;
    let d = param(g, p.d, 0, hi)?;
    let y = ssd::ssm_graph(g, SsmVars { x, dt_raw, a_log, b: bm, c: cm, d, dt_bias }, mode)?;

    if let Some(state) = capture {
        let ch = di + 2 * n;
        let mut st = StepState::zeros(b, hi, ph, n, ch);
        let xv = g.value(xbc);
        let cs = st.conv_state.data_mut();
        for bi in 0..b {
            for j in 0..CONV_KERNEL - 1 {
                // window slot j holds position l - 3 + j
                let Some(t) = (l + j).checked_sub(CONV_KERNEL - 1) else { continue };
                for c in 0..ch {
                    cs[(bi * ch + c) * (CONV_KERNEL - 1) + j] = xv[(bi * l + t) * ch + c];
                }
            }
        }
        let fin = g.scan_final_state(y).expect("scan node");
        st.ssm_state.data_mut().copy_from_slice(&fin);
        *state = st;
    }

    let y = g.reshape(y, vec![b, l, di])?;
    let gate = g.silu(z);
    let y = g.mul(y, gate)?;
    let norm_w = param(g, p.inner_norm_w, 0, di)?;
    let y = g.rmsnorm(y, norm_w, lit(RMS_EPS))?;
    let w_out = param(g, p.w_out, 1, di)?;
    let out = g.linear(y, w_out)?;
    g.check_finite(out, "block output")?;
    Ok(out)
}

/// Pre-norm residual layer: `u + block(rmsnorm(u, pre_norm_w), m)`.
pub fn residual_forward<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    p: &BlockParams,
    u: Var,
    m: usize,
    mode: ScanMode,
    capture: Option<&mut StepState<S>>,
) -> Result<Var> {
    let w = g.param(store, p.pre_norm_w);
    let h = g.rmsnorm(u, w, lit(RMS_EPS))?;
    let h = block_forward_with(g, store, p, h, m, mode, capture)?;
    g.add(u, h)
}

/// `x: [rows, in]` times the transpose of a row-major weight view.
pub(crate) fn linear_rows<S: Scalar>(x: &[S], rows: usize, w: MatRef<'_, S>) -> Vec<S> {
    let mut out = vec![S::zero(); rows * w.rows()];
    gemm(S::one(), MatRef::new(x, rows, w.cols()), w.t(), S::zero(), MatMut::new(&mut out, rows, w.rows()));
    out
}

pub(crate) fn rmsnorm_rows<S: Scalar>(x: &mut [S], w: &[S]) {
    let d = w.len();
    let dn = S::from_usize(d).unwrap();
    for row in x.chunks_mut(d) {
        let ms = row.iter().map(|v| *v * *v).sum::<S>() / dn;
        let r = S::one() / (ms + lit(RMS_EPS)).sqrt();
        for (v, wv) in row.iter_mut().zip(w) {
            *v = *v * r * *wv;
        }
    }
}

/// One token through the block mixer. `u_t: [b, d_model]`; `state` must
/// have been created for the same granularity.
pub fn block_step<S: Scalar>(
    store: &ParamStore<S>,
    p: &BlockParams,
    u_t: &Tensor<S>,
    m: usize,
    state: &mut StepState<S>,
) -> Result<Tensor<S>> {
    let cfg = &p.cfg;
    let dims = resolve_slice(cfg, m)?;
    let (d, di, hi, n, ph) = (cfg.d_model, dims.d_inner, dims.heads, cfg.d_state, cfg.d_head);
    let b = u_t.shape()[0];
    if u_t.shape() != [b, d] {
        return Err(Error::Dimension(format!("step input must be [b, {d}], got {:?}", u_t.shape())));
    }
    let ss = state.ssm_state.shape();
    if ss != [b, hi, ph, n] || state.conv_state.shape() != [b, di + 2 * n, CONV_KERNEL - 1] {
        return Err(Error::State(format!("step state {ss:?} does not match granularity {m}")));
    }
    let rows = |id: ParamId, r: usize| MatRef::new(&store.get(id).data()[..r * d], r, d);
    let u = u_t.data();
    let z = linear_rows(u, b, rows(p.w_z, di));
    let x = linear_rows(u, b, rows(p.w_x, di));
    let bm = linear_rows(u, b, rows(p.w_b, n));
    let cm = linear_rows(u, b, rows(p.w_c, n));
    let dt = linear_rows(u, b, rows(p.w_dt, hi));

    let ch = di + 2 * n;
    let mut xbc = Vec::with_capacity(b * ch);
    for bi in 0..b {
        xbc.extend_from_slice(&x[bi * di..(bi + 1) * di]);
        xbc.extend_from_slice(&bm[bi * n..(bi + 1) * n]);
        xbc.extend_from_slice(&cm[bi * n..(bi + 1) * n]);
    }
    let mut conv_w = store.get(p.w_conv_x).data()[..di * CONV_KERNEL].to_vec();
    conv_w.extend_from_slice(store.get(p.w_conv_bc).data());
    let mut conv_b = store.get(p.conv_bias_x).data()[..di].to_vec();
    conv_b.extend_from_slice(store.get(p.conv_bias_bc).data());
    let conv = state.conv_step(
        &Tensor::new(vec![b, ch], xbc)?,
        &Tensor::new(vec![ch, CONV_KERNEL], conv_w)?,
        &Tensor::new(vec![ch], conv_b)?,
    )?;
    let act: Vec<S> = conv.data().iter().map(|v| silu(*v)).collect();
    let mut xs = Vec::with_capacity(b * di);
    let mut bs = Vec::with_capacity(b * n);
    let mut cs = Vec::with_capacity(b * n);
    for row in act.chunks(ch) {
        xs.extend_from_slice(&row[..di]);
        bs.extend_from_slice(&row[di..di + n]);
        cs.extend_from_slice(&row[di + n..]);
    }
    let params = StepParams {
        a_log: &store.get(p.a_log).data()[..hi],
        d: &store.get(p.d).data()[..hi],
        dt_bias: &store.get(p.dt_bias).data()[..hi],
    };
    let y = ssd::ssm_step(
        state,
        &Tensor::new(vec![b, hi, ph], xs)?,
        &Tensor::new(vec![b, hi], dt)?,
        &Tensor::new(vec![b, n], bs)?,
        &Tensor::new(vec![b, n], cs)?,
        params,
    )?;
    let mut y = y.into_data();
    for (yv, zv) in y.iter_mut().zip(&z) {
        *yv *= silu(*zv);
    }
    rmsnorm_rows(&mut y, &store.get(p.inner_norm_w).data()[..di]);
    let w_out = store.get(p.w_out);
    let out = linear_rows(&y, b, MatRef::strided(w_out.data(), d, di, cfg.d_inner(), 1));
    let out = Tensor::new(vec![b, d], out)?;
    out.validate_finite("block step output")?;
    Ok(out)
}

/// Residual step: `u_t + block_step(rmsnorm(u_t, pre_norm_w))`.
pub fn residual_step<S: Scalar>(
    store: &ParamStore<S>,
    p: &BlockParams,
    u_t: &Tensor<S>,
    m: usize,
    state: &mut StepState<S>,
) -> Result<Tensor<S>> {
    let mut h = u_t.clone();
    rmsnorm_rows(h.data_mut(), store.get(p.pre_norm_w).data());
    let h = block_step(store, p, &h, m, state)?;
    let data = u_t.data().iter().zip(h.data()).map(|(a, b)| *a + *b).collect();
    Tensor::new(u_t.shape().to_vec(), data)
}

/// Fresh zero state sized for granularity `m`.
pub fn zero_state<S: Scalar>(cfg: &BlockConfig, m: usize, batch: usize) -> Result<StepState<S>> {
    let dims = resolve_slice(cfg, m)?;
    Ok(StepState::zeros(batch, dims.heads, cfg.d_head, cfg.d_state, dims.d_inner + 2 * cfg.d_state))
}

#[cfg(test)]
mod tests;
