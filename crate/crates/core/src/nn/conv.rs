//! 3D convolution kernels (im2col + GEMM), single sample, zero padding `k/2`.

use crate::tensor::{gemm, Float, View};

/// Upper bound on im2col buffer elements per chunk.
const COL_LIMIT: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub input: [usize; 3],
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn output(&self) -> [usize; 3] {
        self.input
            .map(|d| (d + 2 * self.pad() - self.k) / self.stride + 1)
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k * self.k
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    /// Output planes (along axis 0) per im2col chunk.
    fn planes_per_chunk(&self) -> usize {
        let o = self.output();
        (COL_LIMIT / (self.rows() * o[1] * o[2]).max(1)).max(1)
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `t`.
fn valid_range(t: usize, pad: usize, stride: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    // i = o * stride + t - pad must satisfy 0 <= i < n_in
    let lo = if t >= pad { 0 } else { (pad - t).div_ceil(stride) };
    let hi = if n_in + pad > t {
        ((n_in + pad - t - 1) / stride + 1).min(n_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom, planes: std::ops::Range<usize>, col: &mut [T]) {
    let [d0, d1, d2] = g.input;
    let o = g.output();
    let (k, s, pad) = (g.k, g.stride, g.pad());
    let plane = o[1] * o[2];
    let ncols = planes.len() * plane;
    col[..g.rows() * ncols].fill(T::zero());
    for c in 0..g.c_in {
        for kd in 0..k {
            let (a0, b0) = valid_range(kd, pad, s, d0, o[0]);
            for kh in 0..k {
                let (a1, b1) = valid_range(kh, pad, s, d1, o[1]);
                for kw in 0..k {
                    let (a2, b2) = valid_range(kw, pad, s, d2, o[2]);
                    let r = ((c * k + kd) * k + kh) * k + kw;
                    let row = &mut col[r * ncols..(r + 1) * ncols];
                    for (p, o0) in planes.clone().enumerate() {
                        if o0 < a0 || o0 >= b0 {
                            continue;
                        }
                        let i0 = o0 * s + kd - pad;
                        for o1 in a1..b1 {
                            let i1 = o1 * s + kh - pad;
                            let src = ((c * d0 + i0) * d1 + i1) * d2;
                            let dst = p * plane + o1 * o[2];
                            if s == 1 {
                                let i2 = a2 + kw - pad;
                                row[dst + a2..dst + b2].copy_from_slice(&x[src + i2..src + i2 + (b2 - a2)]);
                            } else {
                                for o2 in a2..b2 {
                                    row[dst + o2] = x[src + o2 * s + kw - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(col: &[T], g: &ConvGeom, planes: std::ops::Range<usize>, dx: &mut [T]) {
    let [d0, d1, d2] = g.input;
    let o = g.output();
    let (k, s, pad) = (g.k, g.stride, g.pad());
    let plane = o[1] * o[2];
    let ncols = planes.len() * plane;
    for c in 0..g.c_in {
        for kd in 0..k {
            let (a0, b0) = valid_range(kd, pad, s, d0, o[0]);
            for kh in 0..k {
                let (a1, b1) = valid_range(kh, pad, s, d1, o[1]);
                for kw in 0..k {
                    let (a2, b2) = valid_range(kw, pad, s, d2, o[2]);
                    let r = ((c * k + kd) * k + kh) * k + kw;
                    let row = &col[r * ncols..(r + 1) * ncols];
                    for (p, o0) in planes.clone().enumerate() {
                        if o0 < a0 || o0 >= b0 {
                            continue;
                        }
                        let i0 = o0 * s + kd - pad;
                        for o1 in a1..b1 {
                            let i1 = o1 * s + kh - pad;
                            let dst = ((c * d0 + i0) * d1 + i1) * d2;
                            let src = p * plane + o1 * o[2];
                            for o2 in a2..b2 {
                                dx[dst + o2 * s + kw - pad] += row[src + o2];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn chunks(g: &ConvGeom) -> impl Iterator<Item = std::ops::Range<usize>> {
    let n = g.output()[0];
    let step = g.planes_per_chunk();
    (0..n).step_by(step).map(move |a| a..(a + step).min(n))
}

/// `y[co, :] = sum W[co, ci, taps] x[ci, shifted] + b[co]`.
pub fn conv3d_forward<T: Float>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let o = g.output();
    let n: usize = o.iter().product();
    let rows = g.rows();
    let mut y = vec![T::zero(); g.c_out * n];
    if g.pointwise() {
        let nin: usize = g.input.iter().product();
        gemm(T::one(), w, View::rm(g.c_out, rows, 0, rows), x, View::rm(rows, nin, 0, nin), T::zero(), &mut y, View::rm(g.c_out, n, 0, n));
    } else {
        let plane = o[1] * o[2];
        let mut col = vec![T::zero(); rows * g.planes_per_chunk().min(o[0]) * plane];
        for planes in chunks(g) {
            let ncols = planes.len() * plane;
            im2col(x, g, planes.clone(), &mut col);
            gemm(
                T::one(),
                w,
                View::rm(g.c_out, rows, 0, rows),
                &col,
                View::rm(rows, ncols, 0, ncols),
                T::zero(),
                &mut y,
                View::rm(g.c_out, ncols, planes.start * plane, n),
            );
        }
    }
    if let Some(b) = b {
        for (c, row) in y.chunks_mut(n).enumerate() {
            for v in row {
                *v += b[c];
            }
        }
    }
    y
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn conv3d_backward<T: Float>(x: &[T], w: &[T], dy: &[T], g: &ConvGeom, need_dx: bool) -> ConvGrads<T> {
    let o = g.output();
    let n: usize = o.iter().product();
    let nin: usize = g.input.iter().product();
    let rows = g.rows();
    let mut dw = vec![T::zero(); g.c_out * rows];
    let db = dy.chunks(n).map(|r| r.iter().copied().sum()).collect();
    let mut dx = need_dx.then(|| vec![T::zero(); g.c_in * nin]);
    if g.pointwise() {
        gemm(T::one(), dy, View::rm(g.c_out, n, 0, n), x, View::rm_t(n, rows, 0, nin), T::zero(), &mut dw, View::rm(g.c_out, rows, 0, rows));
        if let Some(dx) = dx.as_mut() {
            gemm(T::one(), w, View::rm_t(rows, g.c_out, 0, rows), dy, View::rm(g.c_out, n, 0, n), T::zero(), dx, View::rm(rows, nin, 0, nin));
        }
        return ConvGrads { dx, dw, db };
    }
    let plane = o[1] * o[2];
    let cap = rows * g.planes_per_chunk().min(o[0]) * plane;
    let mut col = vec![T::zero(); cap];
    let mut dcol = if need_dx { vec![T::zero(); cap] } else { Vec::new() };
    for planes in chunks(g) {
        let ncols = planes.len() * plane;
        let dyv = View::rm(g.c_out, ncols, planes.start * plane, n);
        im2col(x, g, planes.clone(), &mut col);
        gemm(T::one(), dy, dyv, &col, View::rm_t(ncols, rows, 0, ncols), T::one(), &mut dw, View::rm(g.c_out, rows, 0, rows));
        if let Some(dx) = dx.as_mut() {
            gemm(T::one(), w, View::rm_t(rows, g.c_out, 0, rows), dy, dyv, T::zero(), &mut dcol, View::rm(rows, ncols, 0, ncols));
            col2im(&dcol, g, planes, dx);
        }
    }
    ConvGrads { dx, dw, db }
}
