//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! the graph through [`Graph::param`], which copies the current value out of
//! a [`ParamStore`]; [`Graph::backward_into`] then adds the leaf gradients
//! back into the store's gradient buffers. Because the store is never
//! zeroed by backward, several graphs over the same parameters (one per
//! granularity) accumulate into the same buffers.

pub mod gradcheck;
mod ops;

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::ssd::kernels::{self, ScanDims, ScanInputs, ScanSaved};
use crate::tensor::{split_at_axis, Tensor};

pub use ops::broadcast_suffix;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<S> {
    Input,
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: S,
    },
    Exp {
        x: Var,
    },
    /// `sig` caches the logistic of every input for the backward pass.
    Silu {
        x: Var,
        sig: Vec<S>,
    },
    Softplus {
        x: Var,
    },
    RmsNorm {
        x: Var,
        w: Var,
        rstd: Vec<S>,
    },
    Conv1d {
        x: Var,
        w: Var,
        bias: Var,
    },
    Scan {
        x: Var,
        dt: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        dims: ScanDims,
        saved: ScanSaved<S>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: S,
        probs: Vec<S>,
    },
    Sum {
        x: Var,
    },
}

pub(crate) struct Node<S> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Arc<Vec<S>>,
    pub(crate) op: Op<S>,
    pub(crate) needs_grad: bool,
}

/// A recorded computation over dense tensors.
pub struct Graph<S> {
    pub(crate) nodes: Vec<Node<S>>,
    params: HashMap<ParamId, Var>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the leaves of one backward pass.
pub struct Gradients<S> {
    leaves: HashMap<usize, Vec<S>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a leaf or parameter node, `None` when it received none.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value: Arc::new(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn node(&self, v: Var) -> &Node<S> {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.as_ref().clone()).expect("graph node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> S {
        self.nodes[v.0].value[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: &Tensor<S>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Input, false)
    }

    pub fn input_owned(&mut self, shape: Vec<usize>, data: Vec<S>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        let shape = t.shape().to_vec();
        Ok(self.push(shape, t.into_data(), Op::Input, false))
    }

    /// Differentiable input whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Registers (once per graph) the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    /// Numeric validation op: errors when `v` holds NaN or infinities.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{what}: non-finite values")))
        }
    }

    /// Reverse pass from the scalar `loss`. Every node is visited at most
    /// once, in reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Dimension(format!("backward needs a scalar, got shape {:?}", self.nodes[loss.0].shape)));
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![S::one()]);
        let mut leaves = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    leaves.insert(i, g);
                }
                Op::Input => {}
                op => self.propagate(op, node, g, &mut grads),
            }
        }
        Ok(Gradients { leaves })
    }

    /// Backward pass whose parameter gradients are added into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<S>) -> Result<Gradients<S>> {
        let grads = self.backward(loss)?;
        for (node, g) in &grads.leaves {
            if let Op::Param(id) = self.nodes[*node].op {
                for (acc, x) in store.get_mut(id).grad_mut().iter_mut().zip(g) {
                    *acc += *x;
                }
            }
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], v: Var, g: Vec<S>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Vec<S>>], v: Var, f: impl FnOnce(&mut [S])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); len]);
        f(slot);
    }

    fn propagate(&self, op: &Op<S>, node: &Node<S>, g: Vec<S>, grads: &mut [Option<Vec<S>>]) {
        match op {
            Op::Input | Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul { a, b, ta, tb } => {
                let (na, nb) = (self.node(*a), self.node(*b));
                let opa = MatRef::new(&na.value, na.shape[0], na.shape[1]).t_if(*ta);
                let opb = MatRef::new(&nb.value, nb.shape[0], nb.shape[1]).t_if(*tb);
                let gm = MatRef::new(&g, opa.rows(), opb.cols());
                self.accumulate_with(grads, *a, |ga| {
                    let (r, c) = (na.shape[0], na.shape[1]);
                    if *ta {
                        gemm(S::one(), opb, gm.t(), S::one(), MatMut::new(ga, r, c));
                    } else {
                        gemm(S::one(), gm, opb.t(), S::one(), MatMut::new(ga, r, c));
                    }
                });
                self.accumulate_with(grads, *b, |gb| {
                    let (r, c) = (nb.shape[0], nb.shape[1]);
                    if *tb {
                        gemm(S::one(), gm.t(), opa, S::one(), MatMut::new(gb, r, c));
                    } else {
                        gemm(S::one(), opa.t(), gm, S::one(), MatMut::new(gb, r, c));
                    }
                });
            }
            Op::Narrow { x, axis, start } => {
                let px = self.node(*x);
                let (outer, extent, inner) = split_at_axis(&px.shape, *axis);
                let len = node.shape[*axis];
                self.accumulate_with(grads, *x, |gx| {
                    for o in 0..outer {
                        let dst = (o * extent + start) * inner;
                        let src = o * len * inner;
                        for (d, s) in gx[dst..dst + len * inner].iter_mut().zip(&g[src..src + len * inner]) {
                            *d += *s;
                        }
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let total = node.shape[*axis];
                let (outer, _, inner) = split_at_axis(&node.shape, *axis);
                let mut offset = 0;
                for x in xs {
                    let len = self.node(*x).shape[*axis];
                    self.accumulate_with(grads, *x, |gx| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for (d, s) in gx[dst..dst + len * inner].iter_mut().zip(&g[src..src + len * inner]) {
                                *d += *s;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Reshape { x } => self.accumulate(grads, *x, g),
            Op::Add { a, b } => {
                let nb = self.node(*b).value.len();
                if self.node(*b).needs_grad {
                    let mut gb = vec![S::zero(); nb];
                    for chunk in g.chunks(nb) {
                        gb.iter_mut().zip(chunk).for_each(|(d, s)| *d += *s);
                    }
                    self.accumulate(grads, *b, gb);
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul { a, b } => {
                let (va, vb) = (&self.node(*a).value, &self.node(*b).value);
                let nb = vb.len();
                if self.node(*b).needs_grad {
                    let mut gb = vec![S::zero(); nb];
                    for (gc, ac) in g.chunks(nb).zip(va.chunks(nb)) {
                        for ((d, gs), av) in gb.iter_mut().zip(gc).zip(ac) {
                            *d += *gs * *av;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
                if self.node(*a).needs_grad {
                    let ga: Vec<S> = g.iter().enumerate().map(|(i, gs)| *gs * vb[i % nb]).collect();
                    self.accumulate(grads, *a, ga);
                }
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.accumulate(grads, *x, g.into_iter().map(|v| v * c).collect());
            }
            Op::Exp { x } => {
                let gx = g.iter().zip(node.value.iter()).map(|(gs, y)| *gs * *y).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Silu { x, sig } => {
                let xv = &self.node(*x).value;
                let gx = g
                    .iter()
                    .zip(xv.iter())
                    .zip(sig)
                    .map(|((gs, xs), sg)| {
                        let sg = *sg;
                        *gs * sg * (S::one() + *xs * (S::one() - sg))
                    })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Softplus { x } => {
                let xv = &self.node(*x).value;
                let gx = g.iter().zip(xv.iter()).map(|(gs, xs)| *gs * sigmoid(*xs)).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::RmsNorm { x, w, rstd } => {
                let (xv, wv) = (&self.node(*x).value, &self.node(*w).value);
                let d = wv.len();
                let dn = S::from_usize(d).unwrap();
                if self.node(*w).needs_grad {
                    let mut gw = vec![S::zero(); d];
                    for ((gr, xr), r) in g.chunks(d).zip(xv.chunks(d)).zip(rstd) {
                        for j in 0..d {
                            gw[j] += gr[j] * xr[j] * *r;
                        }
                    }
                    self.accumulate(grads, *w, gw);
                }
                if self.node(*x).needs_grad {
                    let mut gx = vec![S::zero(); xv.len()];
                    for (((gr, xr), r), out) in g.chunks(d).zip(xv.chunks(d)).zip(rstd).zip(gx.chunks_mut(d)) {
                        let mut proj = S::zero();
                        for j in 0..d {
                            proj += gr[j] * wv[j] * xr[j] * *r;
                        }
                        proj = proj / dn;
                        for j in 0..d {
                            let xh = xr[j] * *r;
                            out[j] = *r * (gr[j] * wv[j] - xh * proj);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Conv1d { x, w, bias } => {
                let nx = self.node(*x);
                let nw = self.node(*w);
                let (b, l, c) = (nx.shape[0], nx.shape[1], nx.shape[2]);
                let (gx, gw, gb) = kernels::conv_backward(b, l, c, nw.shape[1], &nx.value, &nw.value, &g);
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *w, gw);
                self.accumulate(grads, *bias, gb);
            }
            Op::Scan { x, dt, a, b, c, d, dims, saved } => {
                let inp = ScanInputs {
                    x: &self.node(*x).value,
                    dt: &self.node(*dt).value,
                    a: &self.node(*a).value,
                    b: &self.node(*b).value,
                    c: &self.node(*c).value,
                    d: &self.node(*d).value,
                };
                let sg = kernels::scan_backward(*dims, inp, saved, &g);
                self.accumulate(grads, *x, sg.x);
                self.accumulate(grads, *dt, sg.dt);
                self.accumulate(grads, *a, sg.a);
                self.accumulate(grads, *b, sg.b);
                self.accumulate(grads, *c, sg.c);
                self.accumulate(grads, *d, sg.d);
            }
            Op::Gather { table, ids } => {
                let d = node.shape[node.shape.len() - 1];
                self.accumulate_with(grads, *table, |gt| {
                    for (row, id) in ids.iter().enumerate() {
                        for (dst, src) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[row * d..(row + 1) * d]) {
                            *dst += *src;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, smoothing, probs } => {
                let v = self.node(*logits).shape[1];
                let n = targets.len();
                let scale = g[0] / S::from_usize(n).unwrap();
                let off = *smoothing / S::from_usize(v).unwrap();
                let on = S::one() - *smoothing + off;
                let mut gl = Vec::with_capacity(probs.len());
                for (row, t) in targets.iter().enumerate() {
                    for j in 0..v {
                        let q = if j == *t { on } else { off };
                        gl.push((probs[row * v + j] - q) * scale);
                    }
                }
                self.accumulate(grads, *logits, gl);
            }
            Op::Sum { x } => {
                let n = self.node(*x).value.len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<S: Scalar>(x: S) -> S {
    // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}
