//! Forward and backward kernels over raw row-major buffers.
//!
//! Shapes are validated by the tape before these are called.

use crate::scalar::Scalar;

/// `[m,k] x [k,n] -> [m,n]`
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a^T` for a row-major `[rows, cols]` matrix.
pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Geometry of a 3x3, stride 1, padding 1 convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub filters: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvGeom {
    fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Row and column ranges of the output plane that read in-bounds input at
/// offset `(dy, dx)`.
#[inline]
fn valid_range(offset: isize, extent: usize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (extent as isize - offset.max(0)) as usize;
    (lo, hi)
}

/// Cross-correlation with zero padding 1.
pub fn conv2d_forward<T: Scalar>(input: &[T], kernel: &[T], g: ConvGeom) -> Vec<T> {
    let hw = g.plane();
    let (h, w) = (g.height, g.width);
    let mut out = vec![T::zero(); g.batch * g.filters * hw];
    for n in 0..g.batch {
        for f in 0..g.filters {
            let out_plane = &mut out[(n * g.filters + f) * hw..][..hw];
            for c in 0..g.in_channels {
                let in_plane = &input[(n * g.in_channels + c) * hw..][..hw];
                let kbase = (f * g.in_channels + c) * 9;
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = valid_range(dy, h);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = valid_range(dx, w);
                        let wv = kernel[kbase + ky * 3 + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let o = &mut out_plane[y * w + x0..y * w + x1];
                            let ix0 = (x0 as isize + dx) as usize;
                            let i = &in_plane[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                            for (ov, &iv) in o.iter_mut().zip(i) {
                                *ov = *ov + wv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of the convolution with respect to its input.
pub fn conv2d_backward_input<T: Scalar>(grad_out: &[T], kernel: &[T], g: ConvGeom) -> Vec<T> {
    let hw = g.plane();
    let (h, w) = (g.height, g.width);
    let mut grad_in = vec![T::zero(); g.batch * g.in_channels * hw];
    for n in 0..g.batch {
        for c in 0..g.in_channels {
            let gi_plane = &mut grad_in[(n * g.in_channels + c) * hw..][..hw];
            for f in 0..g.filters {
                let go_plane = &grad_out[(n * g.filters + f) * hw..][..hw];
                let kbase = (f * g.in_channels + c) * 9;
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = valid_range(dy, h);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = valid_range(dx, w);
                        let wv = kernel[kbase + ky * 3 + kx];
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let ix0 = (x0 as isize + dx) as usize;
                            let gi = &mut gi_plane[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                            let go = &go_plane[y * w + x0..y * w + x1];
                            for (a, &b) in gi.iter_mut().zip(go) {
                                *a = *a + wv * b;
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Gradient of the convolution with respect to its kernel.
pub fn conv2d_backward_kernel<T: Scalar>(grad_out: &[T], input: &[T], g: ConvGeom) -> Vec<T> {
    let hw = g.plane();
    let (h, w) = (g.height, g.width);
    let mut grad_k = vec![T::zero(); g.filters * g.in_channels * 9];
    for n in 0..g.batch {
        for f in 0..g.filters {
            let go_plane = &grad_out[(n * g.filters + f) * hw..][..hw];
            for c in 0..g.in_channels {
                let in_plane = &input[(n * g.in_channels + c) * hw..][..hw];
                let kbase = (f * g.in_channels + c) * 9;
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = valid_range(dy, h);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = valid_range(dx, w);
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let ix0 = (x0 as isize + dx) as usize;
                            let go = &go_plane[y * w + x0..y * w + x1];
                            let i = &in_plane[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                            acc = acc + go.iter().zip(i).fold(T::zero(), |s, (&a, &b)| s + a * b);
                        }
                        grad_k[kbase + ky * 3 + kx] = grad_k[kbase + ky * 3 + kx] + acc;
                    }
                }
            }
        }
    }
    grad_k
}

/// 2x2 stride-2 max pooling over `[planes, h, w]`. Returns the pooled values
/// and, for each output cell, the flat input index of the first maximal
/// element in row-major window order.
pub fn maxpool2x2<T: Scalar>(input: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + (2 * oy) * w + 2 * ox;
                let mut best = input[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > best {
                        best = input[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

/// Numerically stable row softmax of a `[rows, cols]` matrix.
pub fn softmax_rows<T: Scalar>(logits: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut total = T::zero();
        for (ov, &z) in o.iter_mut().zip(row) {
            *ov = (z - max).exp();
            total = total + *ov;
        }
        for ov in o.iter_mut() {
            *ov = *ov / total;
        }
    }
    out
}

/// `log sum_j exp(row_j)` computed with max subtraction.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = row.iter().map(|&z| (z - max).exp()).sum();
    max + total.ln()
}
