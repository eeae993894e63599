//! Selective state space sequence transformation: discretization, the
//! sequential recurrence, the chunked scan, the causal depthwise
//! convolution and single-token stepping.

pub mod kernels;

use crate::autograd::{softplus, Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use kernels::{ScanDims, ScanMode, DEFAULT_CHUNK};

/// Convolution kernel width used by every block.
pub const CONV_KERNEL: usize = 4;

/// Operands of one scan, before the step-size and decay activations.
#[derive(Clone, Debug)]
pub struct SsmInputs<S> {
    /// `[b, l, h, p]`
    pub x: Tensor<S>,
    /// `[b, l, h]`, pre-activation step sizes
    pub dt_raw: Tensor<S>,
    /// `[h]`; the decay rate is `-exp(a_log)`
    pub a_log: Tensor<S>,
    /// `[b, l, n]`
    pub b: Tensor<S>,
    /// `[b, l, n]`
    pub c: Tensor<S>,
    /// `[h]`
    pub d: Tensor<S>,
    /// `[h]`
    pub dt_bias: Tensor<S>,
}

impl<S: Scalar> SsmInputs<S> {
    pub fn dims(&self) -> Result<ScanDims> {
        let sx = self.x.shape();
        if sx.len() != 4 {
            return Err(dim_err!("x must be [b,l,h,p], got {sx:?}"));
        }
        let (b, l, h, p) = (sx[0], sx[1], sx[2], sx[3]);
        let sb = self.b.shape();
        if sb.len() != 3 || sb[..2] != [b, l] || self.c.shape() != sb {
            return Err(dim_err!("B {:?} / C {:?} must be [{b},{l},n]", sb, self.c.shape()));
        }
        if self.dt_raw.shape() != [b, l, h] {
            return Err(dim_err!("dt must be [{b},{l},{h}], got {:?}", self.dt_raw.shape()));
        }
        for (name, t) in [("A_log", &self.a_log), ("D", &self.d), ("dt_bias", &self.dt_bias)] {
            if t.shape() != [h] {
                return Err(dim_err!("{name} must be [{h}], got {:?}", t.shape()));
            }
        }
        Ok(ScanDims { batch: b, len: l, heads: h, head_dim: p, state: sb[2] })
    }

    /// Activated step sizes `softplus(dt_raw + dt_bias)`.
    pub fn step_sizes(&self) -> Vec<S> {
        let h = self.dt_bias.numel();
        let bias = self.dt_bias.data();
        self.dt_raw.data().iter().enumerate().map(|(i, v)| softplus(*v + bias[i % h])).collect()
    }

    /// Decay rates `-exp(a_log)`, strictly negative.
    pub fn decay_rates(&self) -> Vec<S> {
        decay_rates(self.a_log.data())
    }

    fn run(&self, mode: ScanMode) -> Result<Tensor<S>> {
        let dims = self.dims()?;
        let dt = self.step_sizes();
        let a = self.decay_rates();
        let inp = kernels::ScanInputs {
            x: self.x.data(),
            dt: &dt,
            a: &a,
            b: self.b.data(),
            c: self.c.data(),
            d: self.d.data(),
        };
        let (y, _) = kernels::scan_forward(dims, inp, mode);
        let y = Tensor::new(self.x.shape().to_vec(), y)?;
        y.validate_finite("ssm output")?;
        Ok(y)
    }
}

pub(crate) fn decay_rates<S: Scalar>(a_log: &[S]) -> Vec<S> {
    a_log.iter().map(|v| -v.exp()).collect()
}

/// Reference recurrence, one timestep at a time from a zero state.
pub fn ssm_sequential<S: Scalar>(inputs: &SsmInputs<S>) -> Result<Tensor<S>> {
    inputs.run(ScanMode::Sequential)
}

/// Chunked scan: quadratic form inside each chunk, state carried between
/// chunks. Same result as [`ssm_sequential`] up to rounding.
pub fn ssm_chunked<S: Scalar>(inputs: &SsmInputs<S>, chunk: usize) -> Result<Tensor<S>> {
    if chunk == 0 {
        return Err(Error::Range("chunk size must be at least 1".into()));
    }
    inputs.run(ScanMode::Chunked(chunk))
}

/// Graph handles for a differentiable scan.
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    pub x: Var,
    pub dt_raw: Var,
    pub a_log: Var,
    pub b: Var,
    pub c: Var,
    pub d: Var,
    pub dt_bias: Var,
}

/// Differentiable scan including the step-size and decay activations.
pub fn ssm_graph<S: Scalar>(g: &mut Graph<S>, v: SsmVars, mode: ScanMode) -> Result<Var> {
    let dt = g.add(v.dt_raw, v.dt_bias)?;
    let dt = g.softplus(dt);
    let a = g.exp(v.a_log);
    let a = g.neg(a);
    g.scan(v.x, dt, a, v.b, v.c, v.d, mode)
}

/// Depthwise causal convolution `[b, l, c]` with `weights: [c, 4]`.
pub fn causal_conv1d<S: Scalar>(seq: &Tensor<S>, weights: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let s = seq.shape();
    if s.len() != 3 || weights.shape() != [s[2], CONV_KERNEL] || bias.shape() != [s[2]] {
        return Err(dim_err!("conv1d: input {s:?}, weights {:?}, bias {:?}", weights.shape(), bias.shape()));
    }
    let y = kernels::conv_forward(s[0], s[1], s[2], CONV_KERNEL, seq.data(), weights.data(), bias.data());
    Tensor::new(s.to_vec(), y)
}

/// Recurrent inference state of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct StepState<S> {
    /// `[b, h, p, n]`
    pub ssm_state: Tensor<S>,
    /// `[b, channels, 3]`: the last three convolution inputs, oldest first.
    pub conv_state: Tensor<S>,
}

impl<S: Scalar> StepState<S> {
    pub fn zeros(batch: usize, heads: usize, head_dim: usize, state: usize, channels: usize) -> Self {
        StepState {
            ssm_state: Tensor::zeros(vec![batch, heads, head_dim, state]),
            conv_state: Tensor::zeros(vec![batch, channels, CONV_KERNEL - 1]),
        }
    }

    pub fn batch(&self) -> usize {
        self.ssm_state.shape()[0]
    }

    /// Pushes `x_t: [b, c]` into the window and returns the convolution
    /// output at this position.
    pub fn conv_step(&mut self, x_t: &Tensor<S>, weights: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
        let cs = self.conv_state.shape().to_vec();
        let (b, c) = (cs[0], cs[1]);
        if x_t.shape() != [b, c] || weights.shape() != [c, CONV_KERNEL] || bias.shape() != [c] {
            return Err(dim_err!(
                "conv step: x {:?}, weights {:?}, bias {:?} vs state {cs:?}",
                x_t.shape(),
                weights.shape(),
                bias.shape()
            ));
        }
        let k = CONV_KERNEL;
        let (w, bv, xv) = (weights.data(), bias.data(), x_t.data());
        let st = self.conv_state.data_mut();
        let mut y = vec![S::zero(); b * c];
        for bi in 0..b {
            for ch in 0..c {
                let win = &mut st[(bi * c + ch) * (k - 1)..(bi * c + ch + 1) * (k - 1)];
                let cur = xv[bi * c + ch];
                let mut acc = bv[ch];
                for j in 0..k - 1 {
                    acc += w[ch * k + j] * win[j];
                }
                acc += w[ch * k + k - 1] * cur;
                y[bi * c + ch] = acc;
                win.rotate_left(1);
                win[k - 2] = cur;
            }
        }
        Tensor::new(vec![b, c], y)
    }
}

/// Per-head scan parameters used while stepping.
#[derive(Clone, Copy, Debug)]
pub struct StepParams<'a, S> {
    pub a_log: &'a [S],
    pub d: &'a [S],
    pub dt_bias: &'a [S],
}

/// One recurrence step. `x_t: [b, h, p]`, `dt_raw_t: [b, h]`,
/// `b_t, c_t: [b, n]`; returns `y_t: [b, h, p]` and advances `state`.
pub fn ssm_step<S: Scalar>(
    state: &mut StepState<S>,
    x_t: &Tensor<S>,
    dt_raw_t: &Tensor<S>,
    b_t: &Tensor<S>,
    c_t: &Tensor<S>,
    params: StepParams<'_, S>,
) -> Result<Tensor<S>> {
    let ss = state.ssm_state.shape().to_vec();
    let (b, h, p, n) = (ss[0], ss[1], ss[2], ss[3]);
    if x_t.shape() != [b, h, p]
        || dt_raw_t.shape() != [b, h]
        || b_t.shape() != [b, n]
        || c_t.shape() != [b, n]
        || params.a_log.len() != h
        || params.d.len() != h
        || params.dt_bias.len() != h
    {
        return Err(dim_err!(
            "ssm step: x {:?}, dt {:?}, B {:?}, C {:?} vs state {ss:?}",
            x_t.shape(),
            dt_raw_t.shape(),
            b_t.shape(),
            c_t.shape()
        ));
    }
    let dt: Vec<S> = dt_raw_t.data().iter().enumerate().map(|(i, v)| softplus(*v + params.dt_bias[i % h])).collect();
    let a = decay_rates(params.a_log);
    let y = kernels::scan_step(
        b,
        h,
        p,
        n,
        state.ssm_state.data_mut(),
        x_t.data(),
        &dt,
        &a,
        b_t.data(),
        c_t.data(),
        params.d,
    );
    Tensor::new(vec![b, h, p], y)
}
