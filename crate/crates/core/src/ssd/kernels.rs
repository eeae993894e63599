//! Raw slice kernels for the selective state space recurrence and the
//! depthwise causal convolution. Shapes are passed explicitly; the graph
//! and the public `ssd` functions do the validation.
//!
//! Per batch row and head the recurrence is
//!
//! ```text
//! S_t = exp(dt_t * a) * S_{t-1} + dt_t * x_t B_t^T      (S: head_dim x state)
//! y_t = S_t C_t + d * x_t
//! ```
//!
//! with `S_{-1} = 0`. `dt` here is the already-activated step size.

use crate::linalg::{axpy, dot};
use crate::scalar::Scalar;

/// Chunk length used when nothing else is requested.
pub const DEFAULT_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub state: usize,
}

impl ScanDims {
    fn state_len(&self) -> usize {
        self.head_dim * self.state
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanMode {
    /// One timestep at a time; the reference path.
    Sequential,
    /// Matrix form inside chunks of the given length, state carried across.
    Chunked(usize),
}

impl ScanMode {
    fn chunk(self) -> usize {
        match self {
            ScanMode::Sequential => DEFAULT_CHUNK,
            ScanMode::Chunked(c) => c.max(1),
        }
    }
}

/// Borrowed scan operands.
#[derive(Clone, Copy)]
pub struct ScanInputs<'a, S> {
    /// `[batch, len, heads, head_dim]`
    pub x: &'a [S],
    /// `[batch, len, heads]`, non-negative
    pub dt: &'a [S],
    /// `[heads]`, negative
    pub a: &'a [S],
    /// `[batch, len, state]`
    pub b: &'a [S],
    /// `[batch, len, state]`
    pub c: &'a [S],
    /// `[heads]`
    pub d: &'a [S],
}

/// States at every chunk boundary (including the final state), laid out
/// `[batch, heads, chunks + 1, head_dim, state]`.
#[derive(Clone, Debug)]
pub struct ScanSaved<S> {
    pub chunk: usize,
    pub chunks: usize,
    pub states: Vec<S>,
}

impl<S: Scalar> ScanSaved<S> {
    fn offset(&self, dims: &ScanDims, bi: usize, hi: usize, c: usize) -> usize {
        ((bi * dims.heads + hi) * (self.chunks + 1) + c) * dims.state_len()
    }

    pub fn boundary(&self, dims: &ScanDims, bi: usize, hi: usize, c: usize) -> &[S] {
        let o = self.offset(dims, bi, hi, c);
        &self.states[o..o + dims.state_len()]
    }

    /// Final state laid out `[batch, heads, head_dim, state]`.
    pub fn final_state(&self, dims: &ScanDims) -> Vec<S> {
        let mut out = Vec::with_capacity(dims.batch * dims.heads * dims.state_len());
        for bi in 0..dims.batch {
            for hi in 0..dims.heads {
                out.extend_from_slice(self.boundary(dims, bi, hi, self.chunks));
            }
        }
        out
    }
}

pub struct ScanGrads<S> {
    pub x: Vec<S>,
    pub dt: Vec<S>,
    pub a: Vec<S>,
    pub b: Vec<S>,
    pub c: Vec<S>,
    pub d: Vec<S>,
}

#[inline]
fn xi(dims: &ScanDims, bi: usize, t: usize, hi: usize) -> usize {
    ((bi * dims.len + t) * dims.heads + hi) * dims.head_dim
}

#[inline]
fn ti(dims: &ScanDims, bi: usize, t: usize, hi: usize) -> usize {
    (bi * dims.len + t) * dims.heads + hi
}

#[inline]
fn ni(dims: &ScanDims, bi: usize, t: usize) -> usize {
    (bi * dims.len + t) * dims.state
}

pub fn scan_forward<S: Scalar>(dims: ScanDims, inp: ScanInputs<'_, S>, mode: ScanMode) -> (Vec<S>, ScanSaved<S>) {
    let chunk = mode.chunk();
    let chunks = dims.len.div_ceil(chunk);
    let mut saved =
        ScanSaved { chunk, chunks, states: vec![S::zero(); dims.batch * dims.heads * (chunks + 1) * dims.state_len()] };
    let mut y = vec![S::zero(); dims.batch * dims.len * dims.heads * dims.head_dim];
    match mode {
        ScanMode::Sequential => forward_sequential(&dims, &inp, &mut y, &mut saved),
        ScanMode::Chunked(_) => forward_chunked(&dims, &inp, &mut y, &mut saved),
    }
    (y, saved)
}

fn forward_sequential<S: Scalar>(dims: &ScanDims, inp: &ScanInputs<'_, S>, y: &mut [S], saved: &mut ScanSaved<S>) {
    let (p, n) = (dims.head_dim, dims.state);
    let mut st = vec![S::zero(); p * n];
    for bi in 0..dims.batch {
        for hi in 0..dims.heads {
            st.iter_mut().for_each(|v| *v = S::zero());
            let a = inp.a[hi];
            let d = inp.d[hi];
            for t in 0..dims.len {
                if t % saved.chunk == 0 {
                    let o = saved.offset(dims, bi, hi, t / saved.chunk);
                    saved.states[o..o + p * n].copy_from_slice(&st);
                }
                let dt = inp.dt[ti(dims, bi, t, hi)];
                let decay = (dt * a).exp();
                let xo = xi(dims, bi, t, hi);
                let xrow = &inp.x[xo..xo + p];
                let brow = &inp.b[ni(dims, bi, t)..ni(dims, bi, t) + n];
                let crow = &inp.c[ni(dims, bi, t)..ni(dims, bi, t) + n];
                for pi in 0..p {
                    let srow = &mut st[pi * n..(pi + 1) * n];
                    let scale = dt * xrow[pi];
                    for (s, bv) in srow.iter_mut().zip(brow) {
                        *s = decay * *s + scale * *bv;
                    }
                    y[xo + pi] = dot(srow, crow) + d * xrow[pi];
                }
            }
            let o = saved.offset(dims, bi, hi, saved.chunks);
            saved.states[o..o + p * n].copy_from_slice(&st);
        }
    }
}

fn forward_chunked<S: Scalar>(dims: &ScanDims, inp: &ScanInputs<'_, S>, y: &mut [S], saved: &mut ScanSaved<S>) {
    let (p, n) = (dims.head_dim, dims.state);
    let chunk = saved.chunk;
    let mut gram = vec![S::zero(); chunk * chunk];
    let mut cum = vec![S::zero(); chunk];
    let mut st = vec![S::zero(); p * n];
    for bi in 0..dims.batch {
        for c in 0..saved.chunks {
            let s0 = c * chunk;
            let q = chunk.min(dims.len - s0);
            // C_t . B_k, shared by every head
            for t in 0..q {
                let crow = &inp.c[ni(dims, bi, s0 + t)..ni(dims, bi, s0 + t) + n];
                for k in 0..=t {
                    let brow = &inp.b[ni(dims, bi, s0 + k)..ni(dims, bi, s0 + k) + n];
                    gram[t * chunk + k] = dot(crow, brow);
                }
            }
            for hi in 0..dims.heads {
                let a = inp.a[hi];
                let d = inp.d[hi];
                let mut acc = S::zero();
                for (t, c) in cum[..q].iter_mut().enumerate() {
                    acc += inp.dt[ti(dims, bi, s0 + t, hi)] * a;
                    *c = acc;
                }
                st.copy_from_slice(saved.boundary(dims, bi, hi, c));
                for t in 0..q {
                    let yo = xi(dims, bi, s0 + t, hi);
                    let crow = &inp.c[ni(dims, bi, s0 + t)..ni(dims, bi, s0 + t) + n];
                    let into = cum[t].exp();
                    for pi in 0..p {
                        y[yo + pi] = d * inp.x[yo + pi] + into * dot(&st[pi * n..(pi + 1) * n], crow);
                    }
                    for k in 0..=t {
                        let coef = (cum[t] - cum[k]).exp() * inp.dt[ti(dims, bi, s0 + k, hi)] * gram[t * chunk + k];
                        let xo = xi(dims, bi, s0 + k, hi);
                        axpy(coef, &inp.x[xo..xo + p], &mut y[yo..yo + p]);
                    }
                }
                let end = cum[q - 1];
                let carry = end.exp();
                st.iter_mut().for_each(|v| *v *= carry);
                for (k, &ck) in cum[..q].iter().enumerate() {
                    let w = (end - ck).exp() * inp.dt[ti(dims, bi, s0 + k, hi)];
                    let xo = xi(dims, bi, s0 + k, hi);
                    let brow = &inp.b[ni(dims, bi, s0 + k)..ni(dims, bi, s0 + k) + n];
                    for pi in 0..p {
                        axpy(w * inp.x[xo + pi], brow, &mut st[pi * n..(pi + 1) * n]);
                    }
                }
                let o = saved.offset(dims, bi, hi, c + 1);
                saved.states[o..o + p * n].copy_from_slice(&st);
            }
        }
    }
}

/// Reverse-time adjoint of the recurrence. States inside each chunk are
/// recomputed from the saved chunk boundaries.
pub fn scan_backward<S: Scalar>(
    dims: ScanDims,
    inp: ScanInputs<'_, S>,
    saved: &ScanSaved<S>,
    gy: &[S],
) -> ScanGrads<S> {
    let (p, n) = (dims.head_dim, dims.state);
    let chunk = saved.chunk;
    let mut g = ScanGrads {
        x: vec![S::zero(); inp.x.len()],
        dt: vec![S::zero(); inp.dt.len()],
        a: vec![S::zero(); dims.heads],
        b: vec![S::zero(); inp.b.len()],
        c: vec![S::zero(); inp.c.len()],
        d: vec![S::zero(); dims.heads],
    };
    let mut states = vec![S::zero(); (chunk + 1) * p * n];
    let mut adj = vec![S::zero(); p * n];
    for bi in 0..dims.batch {
        for hi in 0..dims.heads {
            let a = inp.a[hi];
            let d = inp.d[hi];
            adj.iter_mut().for_each(|v| *v = S::zero());
            for c in (0..saved.chunks).rev() {
                let s0 = c * chunk;
                let q = chunk.min(dims.len - s0);
                states[..p * n].copy_from_slice(saved.boundary(&dims, bi, hi, c));
                for j in 0..q {
                    let t = s0 + j;
                    let dt = inp.dt[ti(&dims, bi, t, hi)];
                    let decay = (dt * a).exp();
                    let xo = xi(&dims, bi, t, hi);
                    let brow = &inp.b[ni(&dims, bi, t)..ni(&dims, bi, t) + n];
                    let (prev, next) = states.split_at_mut((j + 1) * p * n);
                    let prev = &prev[j * p * n..];
                    for pi in 0..p {
                        let scale = dt * inp.x[xo + pi];
                        for ((s, sp), bv) in
                            next[pi * n..(pi + 1) * n].iter_mut().zip(&prev[pi * n..(pi + 1) * n]).zip(brow)
                        {
                            *s = decay * *sp + scale * *bv;
                        }
                    }
                }
                for j in (0..q).rev() {
                    let t = s0 + j;
                    let tix = ti(&dims, bi, t, hi);
                    let dt = inp.dt[tix];
                    let decay = (dt * a).exp();
                    let xo = xi(&dims, bi, t, hi);
                    let no = ni(&dims, bi, t);
                    let xrow = &inp.x[xo..xo + p];
                    let gyrow = &gy[xo..xo + p];
                    let brow = &inp.b[no..no + n];
                    let crow = &inp.c[no..no + n];
                    let s_cur = &states[(j + 1) * p * n..(j + 2) * p * n];
                    let s_prev = &states[j * p * n..(j + 1) * p * n];

                    let gc_row = &mut g.c[no..no + n];
                    for pi in 0..p {
                        axpy(gyrow[pi], crow, &mut adj[pi * n..(pi + 1) * n]);
                        axpy(gyrow[pi], &s_cur[pi * n..(pi + 1) * n], gc_row);
                    }
                    g.d[hi] += dot(gyrow, xrow);
                    let mut gdt = S::zero();
                    let gb_row = &mut g.b[no..no + n];
                    for pi in 0..p {
                        let arow = &adj[pi * n..(pi + 1) * n];
                        let ab = dot(arow, brow);
                        g.x[xo + pi] += d * gyrow[pi] + dt * ab;
                        gdt += xrow[pi] * ab;
                        axpy(dt * xrow[pi], arow, gb_row);
                    }
                    let gs = dot(&adj, s_prev);
                    gdt += a * decay * gs;
                    g.a[hi] += dt * decay * gs;
                    g.dt[tix] += gdt;
                    adj.iter_mut().for_each(|v| *v *= decay);
                }
            }
        }
    }
    g
}

/// One recurrence step for every batch row and head. `state` is
/// `[batch, heads, head_dim, state]` and is updated in place; returns
/// `y_t` as `[batch, heads, head_dim]`.
#[allow(clippy::too_many_arguments)]
pub fn scan_step<S: Scalar>(
    batch: usize,
    heads: usize,
    head_dim: usize,
    nstate: usize,
    state: &mut [S],
    x: &[S],
    dt: &[S],
    a: &[S],
    b: &[S],
    c: &[S],
    d: &[S],
) -> Vec<S> {
    let (p, n) = (head_dim, nstate);
    let mut y = vec![S::zero(); batch * heads * p];
    for bi in 0..batch {
        let brow = &b[bi * n..(bi + 1) * n];
        let crow = &c[bi * n..(bi + 1) * n];
        for hi in 0..heads {
            let dtv = dt[bi * heads + hi];
            let decay = (dtv * a[hi]).exp();
            let so = (bi * heads + hi) * p * n;
            let xo = (bi * heads + hi) * p;
            for pi in 0..p {
                let srow = &mut state[so + pi * n..so + (pi + 1) * n];
                let scale = dtv * x[xo + pi];
                for (s, bv) in srow.iter_mut().zip(brow) {
                    *s = decay * *s + scale * *bv;
                }
                y[xo + pi] = dot(srow, crow) + d[hi] * x[xo + pi];
            }
        }
    }
    y
}

/// Depthwise causal convolution over `[batch, len, channels]` with
/// `weights` laid out `[channels, kernel]`; tap `kernel - 1` multiplies the
/// current position.
pub fn conv_forward<S: Scalar>(
    batch: usize,
    len: usize,
    channels: usize,
    kernel: usize,
    x: &[S],
    w: &[S],
    bias: &[S],
) -> Vec<S> {
    let mut y = vec![S::zero(); batch * len * channels];
    for bi in 0..batch {
        for t in 0..len {
            let yo = (bi * len + t) * channels;
            y[yo..yo + channels].copy_from_slice(bias);
            for j in 0..kernel {
                let src = t as isize - (kernel - 1 - j) as isize;
                if src < 0 {
                    continue;
                }
                let xo = (bi * len + src as usize) * channels;
                for ch in 0..channels {
                    y[yo + ch] += w[ch * kernel + j] * x[xo + ch];
                }
            }
        }
    }
    y
}

pub fn conv_backward<S: Scalar>(
    batch: usize,
    len: usize,
    channels: usize,
    kernel: usize,
    x: &[S],
    w: &[S],
    gy: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let mut gx = vec![S::zero(); x.len()];
    let mut gw = vec![S::zero(); w.len()];
    let mut gb = vec![S::zero(); channels];
    for bi in 0..batch {
        for t in 0..len {
            let yo = (bi * len + t) * channels;
            for ch in 0..channels {
                gb[ch] += gy[yo + ch];
            }
            for j in 0..kernel {
                let src = t as isize - (kernel - 1 - j) as isize;
                if src < 0 {
                    continue;
                }
                let xo = (bi * len + src as usize) * channels;
                for ch in 0..channels {
                    gx[xo + ch] += w[ch * kernel + j] * gy[yo + ch];
                    gw[ch * kernel + j] += x[xo + ch] * gy[yo + ch];
                }
            }
        }
    }
    (gx, gw, gb)
}
