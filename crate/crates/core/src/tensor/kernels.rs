//! Slice-level numeric kernels shared by the tape and the eager helpers.
//!
//! Nothing here records gradients; the tape wires forward and backward
//! kernels together.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Strided view of a row-major matrix (optionally transposed).
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Same storage read as the transpose.
    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `out = beta * out + a * b`, with `out` row-major `a.rows x b.cols`.
pub fn gemm(a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64], beta: f64) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(out.len(), a.rows * b.cols);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the views cover `data` for every (row, col) pair inside their
    // extents and `out` is a dense m x n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Eager matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::shape("matmul", sa, sb));
    }
    let mut out = vec![0.0; sa[0] * sb[1]];
    gemm(
        MatRef::new(a.data(), sa[0], sa[1]),
        MatRef::new(b.data(), sb[0], sb[1]),
        &mut out,
        0.0,
    );
    Tensor::new(&[sa[0], sb[1]], out)
}

/// Row-wise softmax over the trailing axis with max subtraction.
pub fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, dst) in data.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = (x - max).exp();
            total += *d;
        }
        let inv = 1.0 / total;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    out
}

/// Backward of [`softmax_rows`] given its output `y` and cotangent `dy`.
pub fn softmax_rows_backward(y: &[f64], dy: &[f64], cols: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((yr, dyr), dxr) in y
        .chunks_exact(cols)
        .zip(dy.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
    {
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - dot);
        }
    }
    dx
}

/// Elementwise max over the leading axis of a `windows x inner` stack.
///
/// Returns the reduced values and, per element, the lowest window index
/// achieving the maximum.
pub fn max_over_windows(stack: &[f64], windows: usize, inner: usize) -> (Vec<f64>, Vec<u32>) {
    let mut out = stack[..inner].to_vec();
    let mut arg = vec![0u32; inner];
    for w in 1..windows {
        let slab = &stack[w * inner..(w + 1) * inner];
        for ((o, a), &v) in out.iter_mut().zip(arg.iter_mut()).zip(slab) {
            if v > *o {
                *o = v;
                *a = w as u32;
            }
        }
    }
    (out, arg)
}

/// Elementwise mean over the leading axis.
pub fn mean_over_windows(stack: &[f64], windows: usize, inner: usize) -> Vec<f64> {
    // Sorted summation makes the result independent of window order.
    let inv = 1.0 / windows as f64;
    let mut column = vec![0.0; windows];
    (0..inner)
        .map(|e| {
            for (w, slot) in column.iter_mut().enumerate() {
                *slot = stack[w * inner + e];
            }
            column.sort_unstable_by(f64::total_cmp);
            column.iter().sum::<f64>() * inv
        })
        .collect()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_derivative(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}

/// Layer normalization over rows of width `cols`.
///
/// Returns `(output, normalized, inverse_std)`; the last two feed backward.
pub fn layer_norm(
    data: &[f64],
    cols: usize,
    gain: &[f64],
    bias: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = data.len() / cols;
    let mut out = vec![0.0; data.len()];
    let mut xhat = vec![0.0; data.len()];
    let mut inv_std = vec![0.0; rows];
    for (r, row) in data.chunks_exact(cols).enumerate() {
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = inv;
        let base = r * cols;
        for c in 0..cols {
            let n = (row[c] - mean) * inv;
            xhat[base + c] = n;
            out[base + c] = n * gain[c] + bias[c];
        }
    }
    (out, xhat, inv_std)
}

/// Gradients of [`layer_norm`] with respect to input, gain and bias.
pub fn layer_norm_backward(
    xhat: &[f64],
    inv_std: &[f64],
    gain: &[f64],
    dy: &[f64],
    cols: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; xhat.len()];
    let mut dgain = vec![0.0; cols];
    let mut dbias = vec![0.0; cols];
    let n = cols as f64;
    for (r, (xr, dyr)) in xhat
        .chunks_exact(cols)
        .zip(dy.chunks_exact(cols))
        .enumerate()
    {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for c in 0..cols {
            dgain[c] += dyr[c] * xr[c];
            dbias[c] += dyr[c];
            let g = dyr[c] * gain[c];
            sum_g += g;
            sum_gx += g * xr[c];
        }
        let inv = inv_std[r];
        let dxr = &mut dx[r * cols..(r + 1) * cols];
        for c in 0..cols {
            let g = dyr[c] * gain[c];
            dxr[c] = inv * (g - sum_g / n - xr[c] * sum_gx / n);
        }
    }
    (dx, dgain, dbias)
}

/// Geometry of a 2-D convolution over NHWC input with HWIO kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[3] != w[2] {
            return Err(Error::shape("conv2d", x, w));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let (in_h, in_w) = (x[1], x[2]);
        let (kh, kw) = (w[0], w[1]);
        if kh > in_h + 2 * pad || kw > in_w + 2 * pad {
            return Err(Error::config(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                in_h + 2 * pad,
                in_w + 2 * pad
            )));
        }
        Ok(ConvGeometry {
            batch: x[0],
            in_h,
            in_w,
            cin: x[3],
            kh,
            kw,
            cout: w[3],
            stride,
            pad,
            out_h: (in_h + 2 * pad - kh) / stride + 1,
            out_w: (in_w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn out_rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    pub fn macs(&self) -> u64 {
        (self.out_rows() * self.patch_len() * self.cout) as u64
    }

    /// Input pixel feeding patch position `(ky, kx)` of output `(oy, ox)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.in_h && x < self.in_w).then_some((y, x))
    }
}

/// Unfolds NHWC input into an `out_rows x patch_len` matrix.
pub fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let plen = g.patch_len();
    let mut cols = vec![0.0; g.out_rows() * plen];
    let mut row = 0;
    for b in 0..g.batch {
        let img = &x[b * g.in_h * g.in_w * g.cin..(b + 1) * g.in_h * g.in_w * g.cin];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut cols[row * plen..(row + 1) * plen];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                            let s = (y * g.in_w + xx) * g.cin;
                            let d = (ky * g.kw + kx) * g.cin;
                            dst[d..d + g.cin].copy_from_slice(&img[s..s + g.cin]);
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Scatter-adds an unfolded gradient back onto NHWC input positions.
pub fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let plen = g.patch_len();
    let mut dx = vec![0.0; g.batch * g.in_h * g.in_w * g.cin];
    let mut row = 0;
    for b in 0..g.batch {
        let base = b * g.in_h * g.in_w * g.cin;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &cols[row * plen..(row + 1) * plen];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                            let d = base + (y * g.in_w + xx) * g.cin;
                            let s = (ky * g.kw + kx) * g.cin;
                            for c in 0..g.cin {
                                dx[d + c] += src[s + c];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
    dx
}

/// Eager convolution: NHWC input, HWIO kernel.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
    let cols = im2col(x.data(), &g);
    let mut out = vec![0.0; g.out_rows() * g.cout];
    gemm(
        MatRef::new(&cols, g.out_rows(), g.patch_len()),
        MatRef::new(w.data(), g.patch_len(), g.cout),
        &mut out,
        0.0,
    );
    Tensor::new(&[g.batch, g.out_h, g.out_w, g.cout], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let y = softmax_rows(&[1000.0, 0.0], 2);
        assert!((y[0] - 1.0).abs() < 1e-12);
        assert!(y[1] >= 0.0 && y[1] < 1e-300);
        assert_eq!(softmax_rows(&[0.0, 0.0], 2), vec![0.5, 0.5]);
    }

    #[test]
    fn max_ties_pick_lowest_window() {
        let (v, a) = max_over_windows(&[1.0, 5.0, 1.0, 2.0, 1.0, 5.0], 3, 2);
        assert_eq!(v, vec![1.0, 5.0]);
        assert_eq!(a, vec![0, 0]);
    }

    #[test]
    fn conv_geometry_extents() {
        let g = ConvGeometry::new(&[1, 224, 224, 3], &[7, 7, 3, 32], 2, 3).unwrap();
        assert_eq!((g.out_h, g.out_w), (112, 112));
        assert!(ConvGeometry::new(&[1, 2, 2, 1], &[3, 3, 1, 1], 1, 0).is_err());
        assert!(ConvGeometry::new(&[1, 4, 4, 2], &[1, 1, 3, 1], 1, 0).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry::new(&[2, 5, 4, 3], &[3, 2, 3, 1], 2, 1).unwrap();
        let x: Vec<f64> = (0..2 * 5 * 4 * 3)
            .map(|i| (i as f64 * 0.37).sin())
            .collect();
        let c: Vec<f64> = (0..g.out_rows() * g.patch_len())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&c, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
