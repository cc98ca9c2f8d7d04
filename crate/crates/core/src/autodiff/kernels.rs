//! Convolution kernels (im2col + gemm) shared by the graph ops.
//!
//! Per-sample work runs through [`crate::parallel`]; weight and bias
//! gradients are reduced over the batch in sample order on one thread so
//! the summation order never depends on the worker count.

use crate::parallel;
use crate::tensor::{gemm, Layout, Scalar};

use super::TensorError;

/// Geometry of a 2-d convolution from a `c_in x h x w` input to a
/// `k_out x ho x wo` output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        op: &'static str,
        c_in: usize,
        h: usize,
        w: usize,
        k_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self, TensorError> {
        if stride == 0 {
            return Err(TensorError::Shape {
                op,
                detail: "stride must be positive".into(),
            });
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::Shape {
                op,
                detail: format!(
                    "padded input {}x{} smaller than kernel {kh}x{kw} on axes (H, W)",
                    h + 2 * pad,
                    w + 2 * pad
                ),
            });
        }
        Ok(Self {
            c_in,
            h,
            w,
            k_out,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.k_out * self.ho * self.wo
    }

    /// Input coordinate hit by kernel tap `k` at output position `o`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + k) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < limit).then_some(p as usize)
    }
}

pub fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let n_cols = g.col_cols();
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * n_cols..(row + 1) * n_cols];
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    match g.src(oy, ky, g.h) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            let src = &x[(c * g.h + iy) * g.w..(c * g.h + iy + 1) * g.w];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.src(ox, kx, g.w) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back onto an (already initialised) image buffer.
pub fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let n_cols = g.col_cols();
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * n_cols..(row + 1) * n_cols];
                for oy in 0..g.ho {
                    let Some(iy) = g.src(oy, ky, g.h) else {
                        continue;
                    };
                    let dst = &mut x[(c * g.h + iy) * g.w..(c * g.h + iy + 1) * g.w];
                    for ox in 0..g.wo {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            dst[ix] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (k, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[k];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Scalar>(dout: &[T], channels: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for sample in dout.chunks(channels * plane) {
        for (k, chunk) in sample.chunks(plane).enumerate() {
            db[k] += chunk.iter().copied().sum::<T>();
        }
    }
    db
}

/// Forward convolution over `n` samples. Returns `(output, cols)`; the
/// columns are kept for the weight gradient.
pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    n: usize,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> (Vec<T>, Vec<T>) {
    let col_len = g.col_rows() * g.col_cols();
    let mut out = vec![T::zero(); n * g.out_len()];
    let mut cols = vec![T::zero(); n * col_len];
    parallel::for_each_chunk2(&mut out, g.out_len(), &mut cols, col_len, |i, o, c| {
        im2col(g, &x[i * g.in_len()..(i + 1) * g.in_len()], c);
        gemm(
            g.k_out,
            g.col_rows(),
            g.col_cols(),
            weight,
            Layout::Normal,
            c,
            Layout::Normal,
            o,
            false,
        );
        if let Some(b) = bias {
            add_bias(o, b, g.col_cols());
        }
    });
    (out, cols)
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    n: usize,
    dout: &[T],
    cols: &[T],
    weight: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let col_len = g.col_rows() * g.col_cols();
    let input = need[0].then(|| {
        let mut dx = vec![T::zero(); n * g.in_len()];
        parallel::for_each_chunk(&mut dx, g.in_len(), |i, dxi| {
            let mut dcols = vec![T::zero(); col_len];
            gemm(
                g.col_rows(),
                g.k_out,
                g.col_cols(),
                weight,
                Layout::Transposed,
                &dout[i * g.out_len()..(i + 1) * g.out_len()],
                Layout::Normal,
                &mut dcols,
                false,
            );
            col2im(g, &dcols, dxi);
        });
        dx
    });
    let weight_grad = need[1].then(|| {
        let mut dw = vec![T::zero(); g.k_out * g.col_rows()];
        for i in 0..n {
            gemm(
                g.k_out,
                g.col_cols(),
                g.col_rows(),
                &dout[i * g.out_len()..(i + 1) * g.out_len()],
                Layout::Normal,
                &cols[i * col_len..(i + 1) * col_len],
                Layout::Transposed,
                &mut dw,
                true,
            );
        }
        dw
    });
    let bias = need[2].then(|| bias_grad(dout, g.k_out, g.col_cols()));
    ConvGrads {
        input,
        weight: weight_grad,
        bias,
    }
}

/// Transposed convolution. `g` is the geometry of the matching forward
/// convolution that maps the *output* (`c_in x h x w` in `g`) back to the
/// input (`k_out x ho x wo` in `g`); the weight is `[k_out, c_in, kh, kw]`.
pub fn conv_transpose2d_forward<T: Scalar>(
    g: &ConvGeom,
    n: usize,
    y: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * g.in_len()];
    parallel::for_each_chunk(&mut out, g.in_len(), |i, oi| {
        let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
        gemm(
            g.col_rows(),
            g.k_out,
            g.col_cols(),
            weight,
            Layout::Transposed,
            &y[i * g.out_len()..(i + 1) * g.out_len()],
            Layout::Normal,
            &mut cols,
            false,
        );
        col2im(g, &cols, oi);
        if let Some(b) = bias {
            add_bias(oi, b, g.h * g.w);
        }
    });
    out
}

pub fn conv_transpose2d_backward<T: Scalar>(
    g: &ConvGeom,
    n: usize,
    dout: &[T],
    y: &[T],
    weight: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let col_len = g.col_rows() * g.col_cols();
    let mut dcols = vec![T::zero(); n * col_len];
    let mut dy = vec![T::zero(); if need[0] { n * g.out_len() } else { 0 }];
    if need[0] || need[1] {
        if need[0] {
            parallel::for_each_chunk2(&mut dcols, col_len, &mut dy, g.out_len(), |i, dc, dyi| {
                im2col(g, &dout[i * g.in_len()..(i + 1) * g.in_len()], dc);
                gemm(
                    g.k_out,
                    g.col_rows(),
                    g.col_cols(),
                    weight,
                    Layout::Normal,
                    dc,
                    Layout::Normal,
                    dyi,
                    false,
                );
            });
        } else {
            parallel::for_each_chunk(&mut dcols, col_len, |i, dc| {
                im2col(g, &dout[i * g.in_len()..(i + 1) * g.in_len()], dc);
            });
        }
    }
    let weight_grad = need[1].then(|| {
        let mut dw = vec![T::zero(); g.k_out * g.col_rows()];
        for i in 0..n {
            gemm(
                g.k_out,
                g.col_cols(),
                g.col_rows(),
                &y[i * g.out_len()..(i + 1) * g.out_len()],
                Layout::Normal,
                &dcols[i * col_len..(i + 1) * col_len],
                Layout::Transposed,
                &mut dw,
                true,
            );
        }
        dw
    });
    let bias = need[2].then(|| bias_grad(dout, g.c_in, g.h * g.w));
    ConvGrads {
        input: need[0].then_some(dy),
        weight: weight_grad,
        bias,
    }
}
