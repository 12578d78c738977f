//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation of one forward pass together with the
//! intermediate values its backward rule needs. Parameters are read in place
//! from a borrowed [`ParamStore`].

pub mod attention;
pub mod conv;
pub mod init;
mod params;

use std::collections::HashMap;
use std::sync::Arc;

use crate::atlas::AttentionMask;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Float, Tensor, View};

pub use attention::{masked_attention, AttentionOutput};
pub use params::{index_path, Grads, IndexEntry, ParamId, ParamStore};

use attention::{attention_backward, attention_forward, head_average, AttnShape};
use conv::{conv3d_backward, conv3d_forward, ConvGeom};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Conv { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom },
    /// Per-channel normalization over spatial positions (instance norm for
    /// `[C, ...]` inputs) or per-row normalization (layer norm for `[N, C]`).
    Norm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        channel_major: bool,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    /// Elementwise map with a stored derivative.
    Pointwise { x: NodeId, dydx: Vec<T> },
    Upsample2 { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        shape: AttnShape,
        weights: Vec<T>,
    },
    SumAll { x: NodeId },
    /// Scalar with precomputed partial derivatives w.r.t. its inputs.
    Scalar { inputs: Vec<NodeId>, partials: Vec<Tensor<T>> },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Float> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, NodeId>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl<'p, T: Float> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, n: NodeId) -> &Tensor<T> {
        match &self.nodes[n.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn shape(&self, n: NodeId) -> &[usize] {
        self.value(n).shape()
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: true,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, n);
        n
    }

    /// Same-padded 3D convolution of `x [Ci, D0, D1, D2]` with
    /// `w [Co, Ci, k, k, k]`.
    pub fn conv3d(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>, stride: usize) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x).to_vec(), self.params.get(w).shape().to_vec());
        if xs.len() != 4 || ws.len() != 5 || ws[1] != xs[0] || ws[2] != ws[3] || ws[3] != ws[4] || stride == 0 {
            return shape_err(format!("conv3d input {xs:?} with weight {ws:?}"));
        }
        let geom = ConvGeom {
            c_in: xs[0],
            c_out: ws[0],
            k: ws[2],
            stride,
            input: [xs[1], xs[2], xs[3]],
        };
        let o = geom.output();
        let bias = b.map(|b| self.params.get(b).data());
        let y = conv3d_forward(self.value(x).data(), self.params.get(w).data(), bias, &geom);
        let (wn, bn) = (self.param(w), b.map(|b| self.param(b)));
        let mut ins = vec![x, wn];
        ins.extend(bn);
        Ok(self.push(
            Tensor::from_vec(&[geom.c_out, o[0], o[1], o[2]], y)?,
            Op::Conv { x, w: wn, b: bn, geom },
            &ins,
        ))
    }

    fn norm(&mut self, x: NodeId, gamma: ParamId, beta: ParamId, channel_major: bool) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        // groups of `n` contiguous entries share one mean and variance
        let (groups, n) = (xs[0], xs[1..].iter().product::<usize>());
        let features = if channel_major { xs[0] } else { xs[1] };
        if self.params.get(gamma).len() != features || self.params.get(beta).len() != features {
            return shape_err(format!("normalization of {xs:?} with {} affine entries", self.params.get(gamma).len()));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.params.get(gamma).data(), self.params.get(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(groups);
        let eps = T::of(NORM_EPS);
        let inv_n = T::of(1.0 / n as f64);
        for gi in 0..groups {
            let s = gi * n;
            let row = &xv[s..s + n];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for e in 0..n {
                let h = (row[e] - mean) * is;
                xhat[s + e] = h;
                let f = if channel_major { gi } else { e };
                y[s + e] = g[f] * h + b[f];
            }
        }
        let (gn, bn) = (self.param(gamma), self.param(beta));
        Ok(self.push(
            Tensor::from_vec(&xs, y)?,
            Op::Norm {
                x,
                gamma: gn,
                beta: bn,
                channel_major,
                xhat,
                inv_std,
            },
            &[x, gn, bn],
        ))
    }

    /// Affine instance normalization of `x [C, ...]` over its spatial extent.
    pub fn instance_norm(&mut self, x: NodeId, gamma: ParamId, beta: ParamId) -> Result<NodeId> {
        self.norm(x, gamma, beta, true)
    }

    /// Affine layer normalization of each row of `x [N, C]`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: ParamId, beta: ParamId) -> Result<NodeId> {
        if self.shape(x).len() != 2 {
            return shape_err(format!("layer_norm expects a matrix, got {:?}", self.shape(x)));
        }
        self.norm(x, gamma, beta, false)
    }

    /// Applies `f`, which returns the value and its derivative.
    pub fn pointwise(&mut self, x: NodeId, f: impl Fn(usize, T) -> (T, T)) -> NodeId {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let (y, dydx): (Vec<T>, Vec<T>) = xv.data().iter().enumerate().map(|(i, &v)| f(i, v)).unzip();
        self.push(Tensor::from_vec(&shape, y).expect("same length"), Op::Pointwise { x, dydx }, &[x])
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let s = T::of(slope);
        self.pointwise(x, |_, v| if v > T::zero() { (v, T::one()) } else { (v * s, s) })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.pointwise(x, |_, v| {
            let t = v.tanh();
            (t, T::one() - t * t)
        })
    }

    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let (a, b) = (T::of(scale), T::of(shift));
        self.pointwise(x, |_, v| (a * v + b, a))
    }

    /// Nearest-neighbor upsampling by 2 of `x [C, D0, D1, D2]`.
    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return shape_err(format!("upsample2 expects [C, D0, D1, D2], got {xs:?}"));
        }
        let (c, d) = (xs[0], [xs[1], xs[2], xs[3]]);
        let o = d.map(|v| 2 * v);
        let xv = self.value(x).data();
        let mut y = vec![T::zero(); c * o.iter().product::<usize>()];
        for ch in 0..c {
            for i in 0..o[0] {
                for j in 0..o[1] {
                    let src = ((ch * d[0] + i / 2) * d[1] + j / 2) * d[2];
                    let dst = ((ch * o[0] + i) * o[1] + j) * o[2];
                    for k in 0..o[2] {
                        y[dst + k] = xv[src + k / 2];
                    }
                }
            }
        }
        Ok(self.push(Tensor::from_vec(&[c, o[0], o[1], o[2]], y)?, Op::Upsample2 { x }, &[x]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("add {:?} + {:?}", self.shape(a), self.shape(b)));
        }
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        Ok(self.push(y, Op::Add { a, b }, &[a, b]))
    }

    /// `[C, D0, D1, D2]` feature map to a `[D0*D1*D2, C]` token sequence.
    pub fn to_sequence(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return shape_err(format!("to_sequence of {xs:?}"));
        }
        let (c, v) = (xs[0], xs[1..].iter().product::<usize>());
        let y = transpose(self.value(x).data(), c, v);
        Ok(self.push(Tensor::from_vec(&[v, c], y)?, Op::Transpose { x }, &[x]))
    }

    /// `x [N, in] W^T + b` with `W [out, in]`.
    pub fn linear(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x).to_vec(), self.params.get(w).shape().to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err(format!("linear {xs:?} with weight {ws:?}"));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut y = vec![T::zero(); n * fout];
        if let Some(b) = b {
            for row in y.chunks_mut(fout) {
                row.copy_from_slice(self.params.get(b).data());
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            T::one(),
            self.value(x).data(),
            View::rm(n, fin, 0, fin),
            self.params.get(w).data(),
            View::rm_t(fin, fout, 0, fin),
            beta,
            &mut y,
            View::rm(n, fout, 0, fout),
        );
        let (wn, bn) = (self.param(w), b.map(|b| self.param(b)));
        let mut ins = vec![x, wn];
        ins.extend(bn);
        Ok(self.push(Tensor::from_vec(&[n, fout], y)?, Op::Linear { x, w: wn, b: bn }, &ins))
    }

    /// Multi-head attention core on projected `q [nq, d]`, `k, v [nk, d]`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        mask: Option<&Arc<AttentionMask>>,
    ) -> Result<NodeId> {
        let (qs, ks, vs) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if qs.len() != 2 || ks != vs || ks.len() != 2 || qs[1] != ks[1] || heads == 0 || qs[1] % heads != 0 {
            return shape_err(format!("attention q {qs:?}, k {ks:?}, v {vs:?}, {heads} heads"));
        }
        let shape = AttnShape {
            nq: qs[0],
            nk: ks[0],
            dim: qs[1],
            heads,
        };
        let (out, weights) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            shape,
            mask.map(|m| m.as_ref()),
        )?;
        Ok(self.push(
            Tensor::from_vec(&[shape.nq, shape.dim], out)?,
            Op::Attention { q, k, v, shape, weights },
            &[q, k, v],
        ))
    }

    /// Head-averaged `[nq, nk]` weights of an attention node.
    pub fn attention_weights(&self, n: NodeId) -> Option<Tensor<T>> {
        match &self.nodes[n.0].op {
            Op::Attention { shape, weights, .. } => Some(
                Tensor::from_vec(&[shape.nq, shape.nk], head_average(weights, shape.heads)).expect("weights shape"),
            ),
            _ => None,
        }
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll { x }, &[x])
    }

    /// A scalar whose partial derivatives w.r.t. `inputs` were computed by
    /// the caller.
    pub fn scalar(&mut self, value: T, inputs: Vec<NodeId>, partials: Vec<Tensor<T>>) -> Result<NodeId> {
        if inputs.len() != partials.len() || inputs.iter().zip(&partials).any(|(&i, p)| self.shape(i) != p.shape()) {
            return shape_err("scalar node partials do not match its inputs".into());
        }
        Ok(self.push(Tensor::scalar(value), Op::Scalar { inputs: inputs.clone(), partials }, &inputs))
    }

    /// Gradients of the scalar `out` with respect to every parameter used.
    pub fn backward(&self, out: NodeId) -> Result<Grads<T>> {
        if !self.value(out).shape().is_empty() {
            return shape_err(format!("backward needs a scalar, got {:?}", self.shape(out)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(T::one()));
        let mut result = Grads::new(self.params.len());
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let send = |grads: &mut Vec<Option<Tensor<T>>>, to: NodeId, t: Tensor<T>| {
                if !self.nodes[to.0].requires_grad {
                    return;
                }
                match &mut grads[to.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {
                    if let Value::Param(id) = node.value {
                        result.accumulate(id, g);
                    }
                }
                Op::Conv { x, w, b, geom } => {
                    let need_dx = self.nodes[x.0].requires_grad;
                    let cg = conv3d_backward(self.value(*x).data(), self.value(*w).data(), g.data(), geom, need_dx);
                    if let Some(dx) = cg.dx {
                        send(&mut grads, *x, Tensor::from_vec(self.shape(*x), dx)?);
                    }
                    send(&mut grads, *w, Tensor::from_vec(self.shape(*w), cg.dw)?);
                    if let Some(b) = b {
                        send(&mut grads, *b, Tensor::from_vec(self.shape(*b), cg.db)?);
                    }
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    channel_major,
                    xhat,
                    inv_std,
                } => {
                    let xs = self.shape(*x);
                    let (groups, n) = (xs[0], xs[1..].iter().product::<usize>());
                    let gm = self.value(*gamma).data();
                    let features = gm.len();
                    let mut dg = vec![T::zero(); features];
                    let mut db = vec![T::zero(); features];
                    let mut dx = vec![T::zero(); g.len()];
                    let gd = g.data();
                    let inv_n = T::of(1.0 / n as f64);
                    let mut dxhat = vec![T::zero(); n];
                    for gi in 0..groups {
                        let s = gi * n;
                        let (mut sum_d, mut sum_dh) = (T::zero(), T::zero());
                        for e in 0..n {
                            let f = if *channel_major { gi } else { e };
                            let dy = gd[s + e];
                            let h = xhat[s + e];
                            dg[f] += dy * h;
                            db[f] += dy;
                            let d = dy * gm[f];
                            dxhat[e] = d;
                            sum_d += d;
                            sum_dh += d * h;
                        }
                        for e in 0..n {
                            dx[s + e] = inv_std[gi] * (dxhat[e] - inv_n * (sum_d + xhat[s + e] * sum_dh));
                        }
                    }
                    send(&mut grads, *x, Tensor::from_vec(xs, dx)?);
                    send(&mut grads, *gamma, Tensor::from_vec(&[features], dg)?.reshape(self.shape(*gamma))?);
                    send(&mut grads, *beta, Tensor::from_vec(&[features], db)?.reshape(self.shape(*beta))?);
                }
                Op::Pointwise { x, dydx } => {
                    let d = g.data().iter().zip(dydx).map(|(&a, &b)| a * b).collect();
                    send(&mut grads, *x, Tensor::from_vec(g.shape(), d)?);
                }
                Op::Upsample2 { x } => {
                    let xs = self.shape(*x).to_vec();
                    let (c, d) = (xs[0], [xs[1], xs[2], xs[3]]);
                    let o = d.map(|v| 2 * v);
                    let gd = g.data();
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    for ch in 0..c {
                        for i in 0..o[0] {
                            for j in 0..o[1] {
                                let dst = ((ch * d[0] + i / 2) * d[1] + j / 2) * d[2];
                                let src = ((ch * o[0] + i) * o[1] + j) * o[2];
                                for k in 0..o[2] {
                                    dx[dst + k / 2] += gd[src + k];
                                }
                            }
                        }
                    }
                    send(&mut grads, *x, Tensor::from_vec(&xs, dx)?);
                }
                Op::Add { a, b } => {
                    send(&mut grads, *b, g.clone());
                    send(&mut grads, *a, g);
                }
                Op::Transpose { x } => {
                    let (v, c) = (g.shape()[0], g.shape()[1]);
                    send(&mut grads, *x, Tensor::from_vec(self.shape(*x), transpose(g.data(), v, c))?);
                }
                Op::Linear { x, w, b } => {
                    let (n, fout) = (g.shape()[0], g.shape()[1]);
                    let fin = self.shape(*x)[1];
                    if self.nodes[x.0].requires_grad {
                        let mut dx = vec![T::zero(); n * fin];
                        gemm(T::one(), g.data(), View::rm(n, fout, 0, fout), self.value(*w).data(), View::rm(fout, fin, 0, fin), T::zero(), &mut dx, View::rm(n, fin, 0, fin));
                        send(&mut grads, *x, Tensor::from_vec(&[n, fin], dx)?);
                    }
                    let mut dw = vec![T::zero(); fout * fin];
                    gemm(T::one(), g.data(), View::rm_t(fout, n, 0, fout), self.value(*x).data(), View::rm(n, fin, 0, fin), T::zero(), &mut dw, View::rm(fout, fin, 0, fin));
                    send(&mut grads, *w, Tensor::from_vec(&[fout, fin], dw)?);
                    if let Some(b) = b {
                        let mut db = vec![T::zero(); fout];
                        for row in g.data().chunks(fout) {
                            for (d, &r) in db.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                        send(&mut grads, *b, Tensor::from_vec(&[fout], db)?);
                    }
                }
                Op::Attention { q, k, v, shape, weights } => {
                    let ag = attention_backward(
                        self.value(*q).data(),
                        self.value(*k).data(),
                        self.value(*v).data(),
                        weights,
                        g.data(),
                        *shape,
                    );
                    send(&mut grads, *q, Tensor::from_vec(&[shape.nq, shape.dim], ag.dq)?);
                    send(&mut grads, *k, Tensor::from_vec(&[shape.nk, shape.dim], ag.dk)?);
                    send(&mut grads, *v, Tensor::from_vec(&[shape.nk, shape.dim], ag.dv)?);
                }
                Op::SumAll { x } => {
                    send(&mut grads, *x, Tensor::filled(self.shape(*x), g.data()[0]));
                }
                Op::Scalar { inputs, partials } => {
                    let s = g.data()[0];
                    for (i, p) in inputs.iter().zip(partials) {
                        let mut t = p.clone();
                        t.scale(s);
                        send(&mut grads, *i, t);
                    }
                }
            }
        }
        Ok(result)
    }
}

fn transpose<T: Float>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            y[c * rows + r] = x[r * cols + c];
        }
    }
    y
}
