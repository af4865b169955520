//! Slice-level kernels behind the tape primitives. Everything here is
//! row-major and allocation-explicit; shape validation happens in the tape.

use super::Scalar;

/// Geometry of a strided, zero-padded sliding window over a `c×h×w` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    #[inline]
    fn source(&self, oy: usize, ox: usize, i: usize, j: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + i) as isize - self.pad as isize;
        let x = (ox * self.stride + j) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// Unfolds `image` into a `(c·kh·kw) × (oh·ow)` column matrix.
pub fn im2col<T: Scalar>(image: &[T], g: &Window) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols = oh * ow;
    let mut out = vec![T::zero(); g.col_rows() * cols];
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    for ox in 0..ow {
                        if let Some((y, x)) = g.source(oy, ox, i, j) {
                            dst[oy * ow + ox] = plane[y * g.width + x];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto the image,
/// summing overlapping contributions.
pub fn col2im<T: Scalar>(cols_data: &[T], g: &Window) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols = oh * ow;
    let mut out = vec![T::zero(); g.channels * g.height * g.width];
    for c in 0..g.channels {
        let base = c * g.height * g.width;
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols_data[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    for ox in 0..ow {
                        if let Some((y, x)) = g.source(oy, ox, i, j) {
                            out[base + y * g.width + x] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Cross-correlation of `x` (`g.channels×h×w`) with `kernel` (`cout×cin×kh×kw`).
pub fn conv2d_forward<T: Scalar>(x: &[T], kernel: &[T], cout: usize, g: &Window) -> Vec<T> {
    let cols = im2col(x, g);
    let (r, p) = (g.col_rows(), g.col_cols());
    let mut out = vec![T::zero(); cout * p];
    T::gemm(cout, r, p, kernel, false, &cols, false, &mut out, false);
    out
}

/// Returns `(d_input, d_kernel)` for [`conv2d_forward`].
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    grad: &[T],
    cout: usize,
    g: &Window,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (r, p) = (g.col_rows(), g.col_cols());
    let dk = need_kernel.then(|| {
        let cols = im2col(x, g);
        let mut dk = vec![T::zero(); cout * r];
        T::gemm(cout, p, r, grad, false, &cols, true, &mut dk, false);
        dk
    });
    let dx = need_input.then(|| {
        let mut dcols = vec![T::zero(); r * p];
        T::gemm(r, cout, p, kernel, true, grad, false, &mut dcols, false);
        col2im(&dcols, g)
    });
    (dx, dk)
}

/// Geometry of a transposed convolution from a `cin×h×w` input: the
/// returned window describes the adjoint convolution over the output image.
pub fn transpose_window(cout: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize) -> Window {
    Window {
        channels: cout,
        height: (h - 1) * stride + kh,
        width: (w - 1) * stride + kw,
        kh,
        kw,
        stride,
        pad: 0,
    }
}

/// Transposed convolution of `x` (`cin×h×w`) with `kernel` (`cin×cout×kh×kw`).
pub fn conv_transpose2d_forward<T: Scalar>(x: &[T], kernel: &[T], cin: usize, g: &Window) -> Vec<T> {
    let (r, p) = (g.col_rows(), g.col_cols());
    let mut cols = vec![T::zero(); r * p];
    T::gemm(r, cin, p, kernel, true, x, false, &mut cols, false);
    col2im(&cols, g)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    grad: &[T],
    cin: usize,
    g: &Window,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (r, p) = (g.col_rows(), g.col_cols());
    let dcols = im2col(grad, g);
    let dx = need_input.then(|| {
        let mut dx = vec![T::zero(); cin * p];
        T::gemm(cin, r, p, kernel, false, &dcols, false, &mut dx, false);
        dx
    });
    let dk = need_kernel.then(|| {
        let mut dk = vec![T::zero(); cin * r];
        T::gemm(cin, p, r, x, false, &dcols, true, &mut dk, false);
        dk
    });
    (dx, dk)
}

/// Per-channel convolution: channel `c` of `x` is correlated with kernel
/// plane `c` only. Kernel is `c×1×kh×kw`.
pub fn depthwise_forward<T: Scalar>(x: &[T], kernel: &[T], g: &Window) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![T::zero(); g.channels * oh * ow];
    let kk = g.kh * g.kw;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        let k = &kernel[c * kk..(c + 1) * kk];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        if let Some((y, xx)) = g.source(oy, ox, i, j) {
                            acc += k[i * g.kw + j] * plane[y * g.width + xx];
                        }
                    }
                }
                dst[oy * ow + ox] = acc;
            }
        }
    }
    out
}

pub fn depthwise_backward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    grad: &[T],
    g: &Window,
) -> (Vec<T>, Vec<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let kk = g.kh * g.kw;
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kernel.len()];
    for c in 0..g.channels {
        let hw = g.height * g.width;
        let plane = &x[c * hw..(c + 1) * hw];
        let k = &kernel[c * kk..(c + 1) * kk];
        let gr = &grad[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = gr[oy * ow + ox];
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        if let Some((y, xx)) = g.source(oy, ox, i, j) {
                            dk[c * kk + i * g.kw + j] += gv * plane[y * g.width + xx];
                            dx[c * hw + y * g.width + xx] += gv * k[i * g.kw + j];
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

/// Non-overlapping max pooling. Returns the pooled values and, for each
/// output cell, the flat input index that won (first index on ties).
pub fn maxpool_forward<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    window: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / window, w / window);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = ch * h * w + oy * window * w + ox * window;
                let mut best = x[best_idx];
                for i in 0..window {
                    for j in 0..window {
                        let idx = ch * h * w + (oy * window + i) * w + ox * window + j;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

/// Row-wise softmax over the last axis with max subtraction. Masked-out
/// entries (`keep[i] == false`) produce exactly zero; a fully masked row is
/// all zeros.
pub fn softmax_rows<T: Scalar>(x: &[T], n: usize, keep: Option<&[bool]>) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (r, (row, dst)) in x.chunks(n).zip(out.chunks_mut(n)).enumerate() {
        let kept = |i: usize| keep.map_or(true, |m| m[r * n + i]);
        let mut max = T::neg_infinity();
        for (i, &v) in row.iter().enumerate() {
            if kept(i) && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            continue;
        }
        let mut sum = T::zero();
        for (i, (&v, d)) in row.iter().zip(dst.iter_mut()).enumerate() {
            if kept(i) {
                *d = (v - max).exp();
                sum += *d;
            }
        }
        let inv = T::one() / sum;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    out
}

/// Row-wise normalisation to zero mean and unit variance. Returns the
/// normalised values and the per-row inverse standard deviation.
pub fn layer_norm_rows<T: Scalar>(x: &[T], n: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / n;
    let nf = T::from_usize(n).unwrap();
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for (row, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
        let mean = row.iter().copied().sum::<T>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let inv = T::one() / (var + eps).sqrt();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}
