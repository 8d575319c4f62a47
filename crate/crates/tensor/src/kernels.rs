//! Raw loops behind the convolution, pooling and normalization primitives.

use crate::real::{gemm, Real};

/// Geometry of a 2-D convolution over an `n×c_in×h×w` batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Rows of one group's column matrix.
    pub fn group_rows(&self) -> usize {
        self.c_in / self.groups * self.kh * self.kw
    }

    /// Columns of the column matrix (one per output pixel of the batch).
    pub fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }

    pub fn out_per_group(&self) -> usize {
        self.c_out / self.groups
    }
}

/// Unfolds input patches into a `groups × group_rows × cols` buffer.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let ncols = g.cols();
    let cig = g.c_in / g.groups;
    let mut cols = vec![T::zero(); g.groups * g.group_rows() * ncols];
    let hw = g.h * g.w;
    for c in 0..g.c_in {
        let grp = c / cig;
        let cl = c % cig;
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = grp * g.group_rows() + (cl * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.n {
                    let src = &x[(b * g.c_in + c) * hw..(b * g.c_in + c + 1) * hw];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        let dst = &mut dst_row[(b * g.oh + oy) * g.ow..(b * g.oh + oy + 1) * g.ow];
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into an input-shaped buffer.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let ncols = g.cols();
    let cig = g.c_in / g.groups;
    let hw = g.h * g.w;
    let mut x = vec![T::zero(); g.n * g.c_in * hw];
    for c in 0..g.c_in {
        let grp = c / cig;
        let cl = c % cig;
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = grp * g.group_rows() + (cl * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.n {
                    let dst = &mut x[(b * g.c_in + c) * hw..(b * g.c_in + c + 1) * hw];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &src_row[(b * g.oh + oy) * g.ow..(b * g.oh + oy + 1) * g.ow];
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] = dst_row[ix as usize] + s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[n, c, s]` → `[c, n·s]`.
pub fn batch_to_channel_major<T: Real>(x: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = &x[(b * c + ch) * s..(b * c + ch + 1) * s];
            out[ch * n * s + b * s..ch * n * s + (b + 1) * s].copy_from_slice(src);
        }
    }
    out
}

/// `[c, n·s]` → `[n, c, s]`.
pub fn channel_major_to_batch<T: Real>(x: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * s..(b * c + ch + 1) * s]
                .copy_from_slice(&x[ch * n * s + b * s..ch * n * s + (b + 1) * s]);
        }
    }
    out
}

/// Grouped convolution; returns the output in `[n, c_out, oh, ow]` layout and
/// the column buffer (needed for the weight gradient).
pub fn conv2d_forward<T: Real>(x: &[T], w: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let cols = im2col(x, g);
    let ncols = g.cols();
    let rows = g.group_rows();
    let cog = g.out_per_group();
    let mut out_cm = vec![T::zero(); g.c_out * ncols];
    for grp in 0..g.groups {
        gemm(
            cog,
            rows,
            ncols,
            &w[grp * cog * rows..(grp + 1) * cog * rows],
            false,
            &cols[grp * rows * ncols..(grp + 1) * rows * ncols],
            false,
            &mut out_cm[grp * cog * ncols..(grp + 1) * cog * ncols],
            false,
        );
    }
    let out = channel_major_to_batch(&out_cm, g.n, g.c_out, g.oh * g.ow);
    (out, cols)
}

/// Gradients of [`conv2d_forward`] with respect to input and weight.
pub fn conv2d_backward<T: Real>(
    dy: &[T],
    w: &[T],
    cols: &[T],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let ncols = g.cols();
    let rows = g.group_rows();
    let cog = g.out_per_group();
    let dy_cm = batch_to_channel_major(dy, g.n, g.c_out, g.oh * g.ow);
    let dw = want_dw.then(|| {
        let mut dw = vec![T::zero(); w.len()];
        for grp in 0..g.groups {
            gemm(
                cog,
                ncols,
                rows,
                &dy_cm[grp * cog * ncols..(grp + 1) * cog * ncols],
                false,
                &cols[grp * rows * ncols..(grp + 1) * rows * ncols],
                true,
                &mut dw[grp * cog * rows..(grp + 1) * cog * rows],
                false,
            );
        }
        dw
    });
    let dx = want_dx.then(|| {
        let mut dcols = vec![T::zero(); g.groups * rows * ncols];
        for grp in 0..g.groups {
            gemm(
                rows,
                cog,
                ncols,
                &w[grp * cog * rows..(grp + 1) * cog * rows],
                true,
                &dy_cm[grp * cog * ncols..(grp + 1) * cog * ncols],
                false,
                &mut dcols[grp * rows * ncols..(grp + 1) * rows * ncols],
                false,
            );
        }
        col2im(&dcols, g)
    });
    (dx, dw)
}

/// Transposed convolution. `adj` is the geometry of the ordinary convolution
/// that maps the transposed convolution's output back onto its input, i.e.
/// `adj.c_in` = output channels, `adj.c_out` = input channels and
/// `adj.oh×adj.ow` = input spatial size. Weight layout is `[c_in, c_out, kh, kw]`.
pub fn conv_transpose2d_forward<T: Real>(x: &[T], w: &[T], adj: &ConvGeom) -> Vec<T> {
    let ncols = adj.cols();
    let rows = adj.group_rows();
    let x_cm = batch_to_channel_major(x, adj.n, adj.c_out, adj.oh * adj.ow);
    let mut cols = vec![T::zero(); rows * ncols];
    gemm(
        rows, adj.c_out, ncols, w, true, &x_cm, false, &mut cols, false,
    );
    col2im(&cols, adj)
}

pub fn conv_transpose2d_backward<T: Real>(
    dy: &[T],
    x: &[T],
    w: &[T],
    adj: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let ncols = adj.cols();
    let rows = adj.group_rows();
    let dcols = im2col(dy, adj);
    let dx = want_dx.then(|| {
        let mut dx_cm = vec![T::zero(); adj.c_out * ncols];
        gemm(
            adj.c_out, rows, ncols, w, false, &dcols, false, &mut dx_cm, false,
        );
        channel_major_to_batch(&dx_cm, adj.n, adj.c_out, adj.oh * adj.ow)
    });
    let dw = want_dw.then(|| {
        let x_cm = batch_to_channel_major(x, adj.n, adj.c_out, adj.oh * adj.ow);
        let mut dw = vec![T::zero(); w.len()];
        gemm(
            adj.c_out, ncols, rows, &x_cm, false, &dcols, true, &mut dw, false,
        );
        dw
    });
    (dx, dw)
}

/// Max pooling without padding. Ties resolve to the first index in
/// row-major scan order.
pub fn maxpool2d_forward<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>, usize, usize) {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * stride * w + ox * stride;
                let mut best = x[best_idx];
                for ki in 0..k {
                    for kj in 0..k {
                        let idx = base + (oy * stride + ki) * w + ox * stride + kj;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax, oh, ow)
}

/// Per-channel statistics of an `[n, c, s]` buffer: (mean, biased variance).
pub fn channel_moments<T: Real>(x: &[T], n: usize, c: usize, s: usize) -> (Vec<T>, Vec<T>) {
    let m = T::lit((n * s) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for b in 0..n {
            acc = acc
                + x[(b * c + ch) * s..(b * c + ch + 1) * s]
                    .iter()
                    .copied()
                    .sum::<T>();
        }
        let mu = acc / m;
        let mut sq = T::zero();
        for b in 0..n {
            for &v in &x[(b * c + ch) * s..(b * c + ch + 1) * s] {
                let d = v - mu;
                sq = sq + d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = sq / m;
    }
    (mean, var)
}
