//! Multi-head scaled dot-product attention with an optional boolean key mask.
//!
//! Masked keys are skipped inside the softmax rather than offset by a large
//! negative number, so their weights are exactly zero.

use crate::atlas::AttentionMask;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Float, Tensor, View};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnShape {
    pub nq: usize,
    pub nk: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttnShape {
    fn dh(&self) -> usize {
        self.dim / self.heads
    }

    fn scale<T: Float>(&self) -> T {
        T::of(1.0 / (self.dh() as f64).sqrt())
    }
}

/// Row-wise softmax over the allowed entries of `s` (in place).
fn masked_softmax<T: Float>(s: &mut [T], allowed: Option<&[bool]>, row: usize) -> Result<()> {
    let mut max = T::neg_infinity();
    match allowed {
        Some(a) => {
            for (v, &ok) in s.iter().zip(a) {
                if ok && *v > max {
                    max = *v;
                }
            }
        }
        None => {
            for &v in s.iter() {
                max = max.max(v);
            }
        }
    }
    if max == T::neg_infinity() {
        return Err(Error::Contract(format!("attention row {row} has no admissible key")));
    }
    let mut sum = T::zero();
    for (i, v) in s.iter_mut().enumerate() {
        if allowed.is_some_and(|a| !a[i]) {
            *v = T::zero();
        } else {
            *v = (*v - max).exp();
            sum += *v;
        }
    }
    let inv = T::one() / sum;
    for v in s.iter_mut() {
        *v *= inv;
    }
    Ok(())
}

/// Returns the output `[nq, dim]` and per-head weights `[heads, nq, nk]`.
pub fn attention_forward<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    sh: AttnShape,
    mask: Option<&AttentionMask>,
) -> Result<(Vec<T>, Vec<T>)> {
    let AttnShape { nq, nk, dim, heads } = sh;
    let dh = sh.dh();
    if let Some(m) = mask {
        if m.num_queries() != nq || m.num_voxels() != nk {
            return Err(Error::Shape(format!(
                "mask is {}x{}, attention is {nq}x{nk}",
                m.num_queries(),
                m.num_voxels()
            )));
        }
    }
    let mut w = vec![T::zero(); heads * nq * nk];
    let mut out = vec![T::zero(); nq * dim];
    for h in 0..heads {
        let wh = &mut w[h * nq * nk..(h + 1) * nq * nk];
        gemm(sh.scale(), q, View::rm(nq, dh, h * dh, dim), k, View::rm_t(dh, nk, h * dh, dim), T::zero(), wh, View::rm(nq, nk, 0, nk));
        for (r, row) in wh.chunks_mut(nk).enumerate() {
            masked_softmax(row, mask.map(|m| m.row(r)), r)?;
        }
        gemm(T::one(), wh, View::rm(nq, nk, 0, nk), v, View::rm(nk, dh, h * dh, dim), T::zero(), &mut out, View::rm(nq, dh, h * dh, dim));
    }
    Ok((out, w))
}

pub struct AttnGrads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
}

pub fn attention_backward<T: Float>(q: &[T], k: &[T], v: &[T], w: &[T], dout: &[T], sh: AttnShape) -> AttnGrads<T> {
    let AttnShape { nq, nk, dim, heads } = sh;
    let dh = sh.dh();
    let mut dq = vec![T::zero(); nq * dim];
    let mut dk = vec![T::zero(); nk * dim];
    let mut dv = vec![T::zero(); nk * dim];
    let mut ds = vec![T::zero(); nq * nk];
    for h in 0..heads {
        let wh = &w[h * nq * nk..(h + 1) * nq * nk];
        let dov = View::rm(nq, dh, h * dh, dim);
        gemm(T::one(), wh, View::rm_t(nk, nq, 0, nk), dout, dov, T::zero(), &mut dv, View::rm(nk, dh, h * dh, dim));
        gemm(T::one(), dout, dov, v, View::rm_t(dh, nk, h * dh, dim), T::zero(), &mut ds, View::rm(nq, nk, 0, nk));
        for (drow, arow) in ds.chunks_mut(nk).zip(wh.chunks(nk)) {
            let dot: T = drow.iter().zip(arow).map(|(&d, &a)| d * a).sum();
            for (d, &a) in drow.iter_mut().zip(arow) {
                *d = a * (*d - dot);
            }
        }
        gemm(sh.scale(), &ds, View::rm(nq, nk, 0, nk), k, View::rm(nk, dh, h * dh, dim), T::zero(), &mut dq, View::rm(nq, dh, h * dh, dim));
        gemm(sh.scale(), &ds, View::rm_t(nk, nq, 0, nk), q, View::rm(nq, dh, h * dh, dim), T::zero(), &mut dk, View::rm(nk, dh, h * dh, dim));
    }
    AttnGrads { dq, dk, dv }
}

/// Mean over heads of `[heads, nq, nk]` weights.
pub fn head_average<T: Float>(w: &[T], heads: usize) -> Vec<T> {
    let n = w.len() / heads;
    let inv = T::of(1.0 / heads as f64);
    (0..n)
        .map(|i| (0..heads).map(|h| w[h * n + i]).sum::<T>() * inv)
        .collect()
}

#[derive(Debug, Clone)]
pub struct AttentionOutput<T> {
    pub output: Tensor<T>,
    /// Head-averaged weights, `[nq, nk]`.
    pub weights: Tensor<T>,
}

/// Standalone masked multi-head attention on already projected `q [nq, d]`,
/// `k [nk, d]`, `v [nk, d]`. A row whose keys are all masked is an error.
pub fn masked_attention<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    mask: Option<&AttentionMask>,
) -> Result<AttentionOutput<T>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || ks != vs || qs[1] != ks[1] || heads == 0 || qs[1] % heads != 0 {
        return Err(Error::Shape(format!(
            "attention shapes q {qs:?}, k {ks:?}, v {vs:?} with {heads} heads"
        )));
    }
    let sh = AttnShape {
        nq: qs[0],
        nk: ks[0],
        dim: qs[1],
        heads,
    };
    let (out, w) = attention_forward(q.data(), k.data(), v.data(), sh, mask)?;
    Ok(AttentionOutput {
        output: Tensor::from_vec(&[sh.nq, sh.dim], out)?,
        weights: Tensor::from_vec(&[sh.nq, sh.nk], head_average(&w, heads))?,
    })
}
