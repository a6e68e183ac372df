//! im2col/col2im kernels shared by convolution and transposed convolution.
//!
//! Column matrices are laid out `[channels * k * k, batch * out_h * out_w]`,
//! row-major, so a convolution is one GEMM against the `[out, in*k*k]` weight.

use crate::error::{ensure, Result};

/// Square-kernel 2D geometry with possibly asymmetric padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad_lo: usize,
    pub pad_hi: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad_lo: pad,
            pad_hi: pad,
        }
    }

    /// Padding that preserves size at stride 1 and divides it by `stride`
    /// otherwise: total `k - stride` split with the extra pixel after.
    pub fn same(kernel: usize, stride: usize) -> Self {
        let total = kernel.saturating_sub(stride);
        Self {
            kernel,
            stride,
            pad_lo: total / 2,
            pad_hi: total - total / 2,
        }
    }

    /// Output extent of a convolution over an input of extent `len`.
    pub fn conv_out(&self, len: usize) -> Result<usize> {
        ensure!(self.stride >= 1, Dimension, "stride must be at least 1");
        let padded = len + self.pad_lo + self.pad_hi;
        ensure!(
            padded >= self.kernel,
            Dimension,
            "kernel {} does not fit padded input extent {}",
            self.kernel,
            padded
        );
        Ok((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of a transposed convolution over an input of extent `len`.
    pub fn transpose_out(&self, len: usize) -> Result<usize> {
        ensure!(self.stride >= 1, Dimension, "stride must be at least 1");
        ensure!(len >= 1, Dimension, "empty input to transposed convolution");
        let grown = (len - 1) * self.stride + self.kernel;
        let trim = self.pad_lo + self.pad_hi;
        ensure!(
            grown > trim,
            Dimension,
            "transposed convolution output size is not positive ({grown} - {trim})"
        );
        Ok(grown - trim)
    }
}

/// Image-batch extents for the kernels below.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Planes {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

pub(crate) fn im2col(input: &[f64], p: Planes, g: ConvGeometry, oh: usize, ow: usize) -> Vec<f64> {
    let k = g.kernel;
    let cols = p.n * oh * ow;
    let mut col = vec![0.0; p.c * k * k * cols];
    for c in 0..p.c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for n in 0..p.n {
                    let src = &input[(n * p.c + c) * p.h * p.w..(n * p.c + c + 1) * p.h * p.w];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad_lo as isize;
                        if iy < 0 || iy >= p.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * p.w..(iy as usize + 1) * p.w];
                        let base = (n * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad_lo as isize;
                            if ix >= 0 && ix < p.w as isize {
                                dst_row[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image batch.
pub(crate) fn col2im(col: &[f64], p: Planes, g: ConvGeometry, oh: usize, ow: usize) -> Vec<f64> {
    let k = g.kernel;
    let cols = p.n * oh * ow;
    let mut out = vec![0.0; p.n * p.c * p.h * p.w];
    for c in 0..p.c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src_row = &col[row * cols..(row + 1) * cols];
                for n in 0..p.n {
                    let plane = (n * p.c + c) * p.h * p.w;
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad_lo as isize;
                        if iy < 0 || iy >= p.h as isize {
                            continue;
                        }
                        let dst = plane + iy as usize * p.w;
                        let base = (n * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad_lo as isize;
                            if ix >= 0 && ix < p.w as isize {
                                out[dst + ix as usize] += src_row[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[N, C, P]` to `[C, N * P]`.
pub(crate) fn batch_to_channel_major(x: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        for ch in 0..c {
            let src = &x[(i * c + ch) * plane..(i * c + ch + 1) * plane];
            out[ch * n * plane + i * plane..ch * n * plane + (i + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

/// `[C, N * P]` to `[N, C, P]`.
pub(crate) fn channel_major_to_batch(x: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        for ch in 0..c {
            out[(i * c + ch) * plane..(i * c + ch + 1) * plane]
                .copy_from_slice(&x[ch * n * plane + i * plane..ch * n * plane + (i + 1) * plane]);
        }
    }
    out
}

/// Row-major operand for [`gemm`], optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a * b + beta * c`, with `c` row-major `[m, n]`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "gemm inner dimensions differ");
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: every operand slice was checked against its logical extent above
    // and in `MatRef::new`; strides describe a dense row-major layout of it.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
