//! Forward constructors for the recorded operations.

use super::{sigmoid, softplus, Graph, Op, Var};
use crate::error::{dim_err, Error, Result};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::scalar::Scalar;
use crate::ssd::kernels::{self, ScanDims, ScanInputs, ScanMode};
use crate::tensor::{check_axis, narrow_copy, split_at_axis};

/// True when `small` equals a trailing suffix of `big`.
pub fn broadcast_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl<S: Scalar> Graph<S> {
    fn grad_any(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// `a @ b` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) @ op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(dim_err!("matmul needs 2-D operands, got {sa:?} and {sb:?}"));
        }
        let opa = MatRef::new(self.value(a), sa[0], sa[1]).t_if(ta);
        let opb = MatRef::new(self.value(b), sb[0], sb[1]).t_if(tb);
        if opa.cols() != opb.rows() {
            return Err(dim_err!("matmul inner dims disagree: {sa:?} (t={ta}) x {sb:?} (t={tb})"));
        }
        let (m, n) = (opa.rows(), opb.cols());
        let mut out = vec![S::zero(); m * n];
        gemm(S::one(), opa, opb, S::zero(), MatMut::new(&mut out, m, n));
        let ng = self.grad_any(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, ta, tb }, ng))
    }

    /// `x @ w^T` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.last() != Some(&sw[1]) {
            return Err(dim_err!("linear: input {sx:?} vs weight {sw:?}"));
        }
        let rows = sx[..sx.len() - 1].iter().product();
        let flat = self.reshape(x, vec![rows, sw[1]])?;
        let y = self.matmul_t(flat, w, false, true)?;
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = sw[0];
        self.reshape(y, out_shape)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(dim_err!("cannot reshape {:?} into {shape:?}", self.shape(x)));
        }
        if self.shape(x) == shape.as_slice() {
            return Ok(x);
        }
        let value = self.nodes[x.0].value.clone();
        let ng = self.nodes[x.0].needs_grad;
        self.nodes.push(super::Node { shape, value, op: Op::Reshape { x }, needs_grad: ng });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `x[start:start+len]` along `axis`. Backward writes only into that
    /// window of the parent gradient.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(&shape, axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(dim_err!("narrow [{start}, {}) out of range for axis {axis} of {shape:?}", start + len));
        }
        if start == 0 && len == shape[axis] {
            return Ok(x);
        }
        let data = narrow_copy(self.value(x), &shape, axis, start, len);
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.needs_grad(x);
        Ok(self.push(out_shape, data, Op::Narrow { x, axis, start }, ng))
    }

    /// The first `n` entries of `x` along `axis`.
    pub fn prefix_slice(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        self.narrow(x, axis, 0, n)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| dim_err!("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        check_axis(&base, axis)?;
        let mut total = 0;
        for x in xs {
            let s = self.shape(*x);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(dim_err!("concat: {s:?} incompatible with {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for x in xs {
                let len = self.shape(*x)[axis] * inner;
                out.extend_from_slice(&self.value(*x)[o * len..(o + 1) * len]);
            }
        }
        let ng = self.grad_any(xs);
        Ok(self.push(out_shape, out, Op::Concat { xs: xs.to_vec(), axis }, ng))
    }

    fn broadcast_operands(&self, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if broadcast_suffix(sa, sb) {
            Ok((a, b))
        } else if broadcast_suffix(sb, sa) {
            Ok((b, a))
        } else {
            Err(dim_err!("cannot broadcast {sa:?} with {sb:?}"))
        }
    }

    /// Elementwise sum; the smaller operand must match trailing dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_operands(a, b)?;
        let vb = &self.nodes[b.0].value;
        let nb = vb.len();
        let out: Vec<S> = self.value(a).iter().enumerate().map(|(i, x)| *x + vb[i % nb]).collect();
        let ng = self.grad_any(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, ng))
    }

    /// Elementwise product with trailing-dim broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_operands(a, b)?;
        let vb = &self.nodes[b.0].value;
        let nb = vb.len();
        let out: Vec<S> = self.value(a).iter().enumerate().map(|(i, x)| *x * vb[i % nb]).collect();
        let ng = self.grad_any(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).iter().map(|v| *v * c).collect();
        let ng = self.needs_grad(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale { x, c }, ng)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -S::one())
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let out = self.value(x).iter().map(|v| f(*v)).collect();
        let ng = self.needs_grad(x);
        self.push(self.shape(x).to_vec(), out, op, ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp { x })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let ng = self.needs_grad(x);
        let sig: Vec<S> = xv.iter().map(|v| sigmoid(*v)).collect();
        let out = xv.iter().zip(&sig).map(|(v, s)| *v * *s).collect();
        let sig = if ng { sig } else { Vec::new() };
        self.push(self.shape(x).to_vec(), out, Op::Silu { x, sig }, ng)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus { x })
    }

    pub fn sigmoid_value(&self, x: Var) -> Vec<S> {
        self.value(x).iter().map(|v| sigmoid(*v)).collect()
    }

    /// `x / sqrt(mean(x^2) + eps) * w` over the last axis.
    pub fn rmsnorm(&mut self, x: Var, w: Var, eps: S) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = self.value(w).len();
        if self.shape(w).len() != 1 || sx.last() != Some(&d) {
            return Err(dim_err!("rmsnorm: input {sx:?} vs weight {:?}", self.shape(w)));
        }
        let dn = S::from_usize(d).unwrap();
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(xv.len() / d);
        for row in xv.chunks(d) {
            let ms = row.iter().map(|v| *v * *v).sum::<S>() / dn;
            let r = S::one() / (ms + eps).sqrt();
            rstd.push(r);
            out.extend(row.iter().zip(wv).map(|(v, w)| *v * r * *w));
        }
        let ng = self.grad_any(&[x, w]);
        Ok(self.push(sx, out, Op::RmsNorm { x, w, rstd }, ng))
    }

    /// Depthwise causal convolution of `x: [b, l, c]` with `w: [c, k]` and
    /// `bias: [c]`, zero left padding.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 2 || sw[0] != sx[2] || self.shape(bias) != [sx[2]] {
            return Err(dim_err!("conv1d: input {sx:?}, weights {sw:?}, bias {:?}", self.shape(bias)));
        }
        let out = kernels::conv_forward(sx[0], sx[1], sx[2], sw[1], self.value(x), self.value(w), self.value(bias));
        let ng = self.grad_any(&[x, w, bias]);
        Ok(self.push(sx, out, Op::Conv1d { x, w, bias }, ng))
    }

    /// Selective scan over already-activated operands: `x: [b,l,h,p]`,
    /// `dt: [b,l,h]` (non-negative), `a: [h]` (negative), `b, c: [b,l,n]`,
    /// `d: [h]`.
    #[allow(clippy::too_many_arguments)]
    pub fn scan(&mut self, x: Var, dt: Var, a: Var, b: Var, c: Var, d: Var, mode: ScanMode) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(dim_err!("scan: x must be [b,l,h,p], got {sx:?}"));
        }
        let (bs, l, h, p) = (sx[0], sx[1], sx[2], sx[3]);
        let sb = self.shape(b).to_vec();
        if sb.len() != 3 || sb[0] != bs || sb[1] != l {
            return Err(dim_err!("scan: B must be [{bs},{l},n], got {sb:?}"));
        }
        let n = sb[2];
        if self.shape(c) != sb.as_slice() {
            return Err(dim_err!("scan: C {:?} must match B {sb:?}", self.shape(c)));
        }
        if self.shape(dt) != [bs, l, h] {
            return Err(dim_err!("scan: dt must be [{bs},{l},{h}], got {:?}", self.shape(dt)));
        }
        if self.shape(a) != [h] || self.shape(d) != [h] {
            return Err(dim_err!("scan: A {:?} and D {:?} must be [{h}]", self.shape(a), self.shape(d)));
        }
        if let ScanMode::Chunked(0) = mode {
            return Err(Error::Range("chunk size must be at least 1".into()));
        }
        let dims = ScanDims { batch: bs, len: l, heads: h, head_dim: p, state: n };
        let inp = ScanInputs {
            x: self.value(x),
            dt: self.value(dt),
            a: self.value(a),
            b: self.value(b),
            c: self.value(c),
            d: self.value(d),
        };
        let (y, saved) = kernels::scan_forward(dims, inp, mode);
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("scan produced non-finite values".into()));
        }
        let ng = self.grad_any(&[x, dt, a, b, c, d]);
        Ok(self.push(sx, y, Op::Scan { x, dt, a, b, c, d, dims, saved }, ng))
    }

    /// Final scan state `[b, h, p, n]` of a node produced by [`Graph::scan`].
    pub fn scan_final_state(&self, v: Var) -> Option<Vec<S>> {
        match &self.nodes[v.0].op {
            Op::Scan { dims, saved, .. } => Some(saved.final_state(dims)),
            _ => None,
        }
    }

    /// Rows of `table: [V, d]` selected by `ids`; output `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(dim_err!("gather: table must be 2-D, got {st:?}"));
        }
        let (v, d) = (st[0], st[1]);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!("row {id} out of range for {v} rows")));
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let ng = self.needs_grad(table);
        Ok(self.push(vec![ids.len(), d], out, Op::Gather { table, ids: ids.to_vec() }, ng))
    }

    /// Mean label-smoothed negative log-likelihood of `logits: [n, V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: S) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(dim_err!("cross_entropy: logits {sl:?} vs {} targets", targets.len()));
        }
        if !(smoothing >= S::zero() && smoothing < S::one()) {
            return Err(Error::Range(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        let v = sl[1];
        if let Some(t) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index(format!("target {t} out of range for {v} classes")));
        }
        let vn = S::from_usize(v).unwrap();
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(lv.len());
        let mut total = S::zero();
        for (row, &t) in lv.chunks(v).zip(targets) {
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let sum: S = row.iter().map(|z| (*z - mx).exp()).sum();
            let lse = mx + sum.ln();
            let mean_logit = row.iter().copied().sum::<S>() / vn;
            total += (S::one() - smoothing) * (lse - row[t]) + smoothing * (lse - mean_logit);
            probs.extend(row.iter().map(|z| (*z - lse).exp()));
        }
        let loss = total / S::from_usize(targets.len()).unwrap();
        let ng = self.needs_grad(logits);
        Ok(self.push(vec![1], vec![loss], Op::CrossEntropy { logits, targets: targets.to_vec(), smoothing, probs }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let ng = self.needs_grad(x);
        self.push(vec![1], vec![s], Op::Sum { x }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = S::from_usize(self.value(x).len()).unwrap();
        let s = self.sum(x);
        self.scale(s, S::one() / n)
    }
}
