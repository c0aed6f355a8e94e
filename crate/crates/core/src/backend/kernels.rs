//! Slice-level forward/backward kernels behind the graph operations.
//!
//! Convolutions go through im2col + GEMM. Column matrices are laid out as
//! `[C·k·k, N·Ho·Wo]`, so a whole batch is a single matrix product.

use crate::scalar::Scalar;

/// Spatial geometry shared by a convolution and its adjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub batch: usize,
    pub channels: usize,
    /// Extent of the "image" side (input of conv, output of deconv).
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// Extent of the sliding-window side (output of conv, input of deconv).
    pub oh: usize,
    pub ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.batch * self.oh * self.ow
    }
}

/// Range of window indices `o` in `0..n_out` for which `o*stride + off` lands in `0..extent`.
#[inline]
fn valid_range(n_out: usize, stride: usize, off: isize, extent: usize) -> (usize, usize) {
    let s = stride as isize;
    // smallest o with o*s + off >= 0
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    // largest o with o*s + off <= extent-1, exclusive bound
    let hi_num = extent as isize - 1 - off;
    let hi = if hi_num < 0 { 0 } else { hi_num / s + 1 };
    let lo = lo.clamp(0, n_out as isize) as usize;
    let hi = hi.clamp(0, n_out as isize) as usize;
    (lo, hi.max(lo))
}

pub(crate) fn im2col<T: Scalar>(src: &[T], g: &Geometry) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = vec![T::zero(); rows * cols];
    let plane = g.h * g.w;
    let opl = g.oh * g.ow;
    for c in 0..g.channels {
        for ki in 0..g.k {
            let (oy0, oy1) = valid_range(g.oh, g.stride, ki as isize - g.pad as isize, g.h);
            for kj in 0..g.k {
                let (ox0, ox1) = valid_range(g.ow, g.stride, kj as isize - g.pad as isize, g.w);
                let row = (c * g.k + ki) * g.k + kj;
                let dst_row = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.batch {
                    let src_plane = &src[(n * g.channels + c) * plane..][..plane];
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ki - g.pad;
                        let src_row = &src_plane[iy * g.w..(iy + 1) * g.w];
                        let dst = &mut dst_row[n * opl + oy * g.ow..][..g.ow];
                        if g.stride == 1 {
                            let ix0 = ox0 + kj - g.pad;
                            dst[ox0..ox1].copy_from_slice(&src_row[ix0..ix0 + (ox1 - ox0)]);
                        } else {
                            for ox in ox0..ox1 {
                                dst[ox] = src_row[ox * g.stride + kj - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image buffer.
pub(crate) fn col2im<T: Scalar>(cols_buf: &[T], g: &Geometry) -> Vec<T> {
    let cols = g.cols();
    let plane = g.h * g.w;
    let opl = g.oh * g.ow;
    let mut out = vec![T::zero(); g.batch * g.channels * plane];
    for c in 0..g.channels {
        for ki in 0..g.k {
            let (oy0, oy1) = valid_range(g.oh, g.stride, ki as isize - g.pad as isize, g.h);
            for kj in 0..g.k {
                let (ox0, ox1) = valid_range(g.ow, g.stride, kj as isize - g.pad as isize, g.w);
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &cols_buf[row * cols..(row + 1) * cols];
                for n in 0..g.batch {
                    let dst_plane = &mut out[(n * g.channels + c) * plane..][..plane];
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ki - g.pad;
                        let dst_row = &mut dst_plane[iy * g.w..(iy + 1) * g.w];
                        let src = &src_row[n * opl + oy * g.ow..][..g.ow];
                        for ox in ox0..ox1 {
                            dst_row[ox * g.stride + kj - g.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[N, C, P]` -> `[C, N·P]`
pub(crate) fn batch_to_channel_major<T: Scalar>(src: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * p + b * p..][..p].copy_from_slice(&src[(b * c + ch) * p..][..p]);
        }
    }
    out
}

/// `[C, N·P]` -> `[N, C, P]`
pub(crate) fn channel_to_batch_major<T: Scalar>(src: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * p..][..p].copy_from_slice(&src[ch * n * p + b * p..][..p]);
        }
    }
    out
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], n: usize, p: usize) {
    let c = bias.len();
    for b in 0..n {
        for (ch, &bv) in bias.iter().enumerate() {
            for v in &mut out[(b * c + ch) * p..][..p] {
                *v += bv;
            }
        }
    }
}

fn channel_sums<T: Scalar>(g: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut db = vec![T::zero(); c];
    for b in 0..n {
        for (ch, acc) in db.iter_mut().enumerate() {
            *acc += g[(b * c + ch) * p..][..p].iter().copied().sum::<T>();
        }
    }
    db
}

/// Cross-correlation. `x: [N,C,H,W]`, `w: [O,C,k,k]` -> `[N,O,Ho,Wo]`.
pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &Geometry, out_ch: usize) -> Vec<T> {
    let cols = im2col(x, g);
    let (rows, ncols) = (g.rows(), g.cols());
    let mut mat = vec![T::zero(); out_ch * ncols];
    T::gemm(
        out_ch, rows, ncols, T::one(), w, rows as isize, 1, &cols, ncols as isize, 1, T::zero(), &mut mat,
        ncols as isize, 1,
    );
    let p = g.oh * g.ow;
    let mut out = channel_to_batch_major(&mat, g.batch, out_ch, p);
    if let Some(b) = bias {
        add_channel_bias(&mut out, b, g.batch, p);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &Geometry,
    out_ch: usize,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (rows, ncols) = (g.rows(), g.cols());
    let p = g.oh * g.ow;
    let gmat = batch_to_channel_major(gout, g.batch, out_ch, p);
    let db = need.2.then(|| channel_sums(gout, g.batch, out_ch, p));
    let dw = need.1.then(|| {
        let cols = im2col(x, g);
        let mut dw = vec![T::zero(); out_ch * rows];
        // gmat [O, L] · cols^T [L, rows]
        T::gemm(
            out_ch, ncols, rows, T::one(), &gmat, ncols as isize, 1, &cols, 1, ncols as isize, T::zero(), &mut dw,
            rows as isize, 1,
        );
        dw
    });
    let dx = need.0.then(|| {
        let mut dcols = vec![T::zero(); rows * ncols];
        // w^T [rows, O] · gmat [O, L]
        T::gemm(
            rows, out_ch, ncols, T::one(), w, 1, rows as isize, &gmat, ncols as isize, 1, T::zero(), &mut dcols,
            ncols as isize, 1,
        );
        col2im(&dcols, g)
    });
    ConvGrads { dx, dw, db }
}

/// Transposed convolution. `x: [N,Cin,H,W]` with `w: [Cin,O,k,k]`.
///
/// `g` describes the adjoint convolution: `g.channels = O`, `g.h/g.w` the
/// output extent, `g.oh/g.ow` the input extent.
pub(crate) fn deconv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &Geometry, in_ch: usize) -> Vec<T> {
    let (rows, ncols) = (g.rows(), g.cols());
    let xmat = batch_to_channel_major(x, g.batch, in_ch, g.oh * g.ow);
    let mut cols = vec![T::zero(); rows * ncols];
    // w^T [rows, Cin] · xmat [Cin, L]
    T::gemm(
        rows, in_ch, ncols, T::one(), w, 1, rows as isize, &xmat, ncols as isize, 1, T::zero(), &mut cols,
        ncols as isize, 1,
    );
    let mut out = col2im(&cols, g);
    if let Some(b) = bias {
        add_channel_bias(&mut out, b, g.batch, g.h * g.w);
    }
    out
}

pub(crate) fn deconv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &Geometry,
    in_ch: usize,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (rows, ncols) = (g.rows(), g.cols());
    let db = need.2.then(|| channel_sums(gout, g.batch, g.channels, g.h * g.w));
    if !need.0 && !need.1 {
        return ConvGrads { dx: None, dw: None, db };
    }
    let gcols = im2col(gout, g);
    let dx = need.0.then(|| {
        let mut dmat = vec![T::zero(); in_ch * ncols];
        T::gemm(
            in_ch, rows, ncols, T::one(), w, rows as isize, 1, &gcols, ncols as isize, 1, T::zero(), &mut dmat,
            ncols as isize, 1,
        );
        channel_to_batch_major(&dmat, g.batch, in_ch, g.oh * g.ow)
    });
    let dw = need.1.then(|| {
        let xmat = batch_to_channel_major(x, g.batch, in_ch, g.oh * g.ow);
        let mut dw = vec![T::zero(); in_ch * rows];
        // xmat [Cin, L] · gcols^T [L, rows]
        T::gemm(
            in_ch, ncols, rows, T::one(), &xmat, ncols as isize, 1, &gcols, 1, ncols as isize, T::zero(), &mut dw,
            rows as isize, 1,
        );
        dw
    });
    ConvGrads { dx, dw, db }
}

/// 2×2 max pooling with stride 2; returns values and flat argmax indices.
pub(crate) fn max_pool2_forward<T: Scalar>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
