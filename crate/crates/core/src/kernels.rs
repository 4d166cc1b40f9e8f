//! Numeric kernels behind the autodiff tape: GEMM, im2col/col2im
//! convolutions, instance normalization and pooling.
//!
//! Every kernel writes disjoint output blocks per task; reductions (bias and
//! weight gradients, normalization statistics) are accumulated in a fixed
//! order, so results do not depend on the execution mode.

use crate::parallel::{for_each_chunk_mut, map_collect, MIN_SPLIT};

/// Strided read-only matrix view: element `(i, j)` is `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            rs: 1,
            cs: cols,
        }
    }
}

/// `c[m x n] = a[m x k] * b[k x n]`, or `c += ...` when `accumulate`.
/// `c` is dense row-major.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    debug_assert!((m - 1) * a.rs + (k - 1) * a.cs < a.data.len());
    debug_assert!((k - 1) * b.rs + (n - 1) * b.cs < b.data.len());
    let beta = if accumulate { 1.0 } else { 0.0 };
    let work = m * n * k;
    // each task repacks `b`, so split no finer than the worker count
    let tasks = crate::parallel::workers().min(16);
    let rows_per_task = if work < MIN_SPLIT * 64 || tasks == 1 {
        m
    } else {
        m.div_ceil(tasks).max(1)
    };
    let a_addr = a.data.as_ptr() as usize;
    let b_addr = b.data.as_ptr() as usize;
    for_each_chunk_mut(&mut c[..m * n], rows_per_task * n, |task, c_block| {
        let r0 = task * rows_per_task;
        let rows = c_block.len() / n;
        // SAFETY: the asserted extents above keep every access of rows
        // r0..r0+rows of `a` and all of `b` inside their slices; `c_block`
        // is an exclusive, dense rows x n block.
        unsafe {
            let a_ptr = (a_addr as *const f64).add(r0 * a.rs);
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a_ptr,
                a.rs as isize,
                a.cs as isize,
                b_addr as *const f64,
                b.rs as isize,
                b.cs as isize,
                beta,
                c_block.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Geometry of a convolution seen from its (padded) image side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output length of a convolution along one axis, `None` if it would be empty.
pub fn conv_out_len(n: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < kernel || stride == 0 {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// Output length of a transposed convolution along one axis.
pub fn conv_transpose_out_len(
    n: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Option<usize> {
    ((n - 1) * stride + kernel + output_pad).checked_sub(2 * pad)
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (k, hw_out) = (g.kernel, g.cols());
    for_each_chunk_mut(&mut cols[..g.rows() * hw_out], hw_out, |row, out| {
        let c = row / (k * k);
        let ki = (row / k) % k;
        let kj = row % k;
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for oy in 0..g.out_h {
            let iy = (oy * g.stride + ki) as isize - g.pad as isize;
            let dst = &mut out[oy * g.out_w..(oy + 1) * g.out_w];
            if iy < 0 || iy >= g.height as isize {
                dst.iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
            for (ox, d) in dst.iter_mut().enumerate() {
                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                *d = if ix < 0 || ix >= g.width as isize {
                    0.0
                } else {
                    src[ix as usize]
                };
            }
        }
    });
}

/// Scatter-add columns back onto the image; `x` is overwritten.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (k, hw_out, plane_len) = (g.kernel, g.cols(), g.height * g.width);
    for_each_chunk_mut(&mut x[..g.channels * plane_len], plane_len, |c, plane| {
        plane.iter_mut().for_each(|v| *v = 0.0);
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    });
}

/// Dense 2-D convolution. `x: (B, Ci, H, W)`, `w: (Co, Ci, k, k)`.
pub(crate) fn conv2d_forward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    w: &[f64],
    out_channels: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (kk, n) = (g.rows(), g.cols());
    let in_len = g.channels * g.height * g.width;
    let mut out = vec![0.0; batch * out_channels * n];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; kk * n]
    };
    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let rhs: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        let ob = &mut out[b * out_channels * n..(b + 1) * out_channels * n];
        gemm(
            out_channels,
            kk,
            n,
            MatRef::row_major(w, kk),
            MatRef::row_major(rhs, n),
            ob,
            false,
        );
        if let Some(bias) = bias {
            add_channel_bias(ob, bias, n);
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    w: &[f64],
    out_channels: usize,
    dy: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let (need_dx, need_dw, need_db) = need;
    let (kk, n) = (g.rows(), g.cols());
    let in_len = g.channels * g.height * g.width;
    let mut dx = need_dx.then(|| vec![0.0; batch * in_len]);
    let mut dw = need_dw.then(|| vec![0.0; out_channels * kk]);
    let db = need_db.then(|| channel_sums(dy, batch, out_channels, n));
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { kk * n }];
    let mut dcols = vec![0.0; if need_dx && !g.is_pointwise() { kk * n } else { 0 }];
    for b in 0..batch {
        let dyb = &dy[b * out_channels * n..(b + 1) * out_channels * n];
        if let Some(dw) = dw.as_mut() {
            let xb = &x[b * in_len..(b + 1) * in_len];
            let rhs: &[f64] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            gemm(
                out_channels,
                n,
                kk,
                MatRef::row_major(dyb, n),
                MatRef::transposed(rhs, n),
                dw,
                true,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            let wt = MatRef::transposed(w, kk);
            if g.is_pointwise() {
                gemm(kk, out_channels, n, wt, MatRef::row_major(dyb, n), dxb, false);
            } else {
                gemm(
                    kk,
                    out_channels,
                    n,
                    wt,
                    MatRef::row_major(dyb, n),
                    &mut dcols,
                    false,
                );
                col2im(&dcols, g, dxb);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Transposed convolution. `x: (B, Ci, H, W)`, `w: (Ci, Co, k, k)`; `g`
/// describes the output image (`channels = Co`, `out_h/out_w = H/W`).
pub(crate) fn conv_transpose2d_forward(
    x: &[f64],
    batch: usize,
    in_channels: usize,
    g: &ConvGeom,
    w: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (kk, n) = (g.rows(), g.cols());
    let out_len = g.channels * g.height * g.width;
    let mut out = vec![0.0; batch * out_len];
    let mut cols = vec![0.0; kk * n];
    for b in 0..batch {
        let xb = &x[b * in_channels * n..(b + 1) * in_channels * n];
        gemm(
            kk,
            in_channels,
            n,
            MatRef::transposed(w, kk),
            MatRef::row_major(xb, n),
            &mut cols,
            false,
        );
        let ob = &mut out[b * out_len..(b + 1) * out_len];
        col2im(&cols, g, ob);
        if let Some(bias) = bias {
            add_channel_bias(ob, bias, g.height * g.width);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward(
    x: &[f64],
    batch: usize,
    in_channels: usize,
    g: &ConvGeom,
    w: &[f64],
    dy: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let (need_dx, need_dw, need_db) = need;
    let (kk, n) = (g.rows(), g.cols());
    let out_len = g.channels * g.height * g.width;
    let mut dx = need_dx.then(|| vec![0.0; batch * in_channels * n]);
    let mut dw = need_dw.then(|| vec![0.0; in_channels * kk]);
    let db = need_db.then(|| channel_sums(dy, batch, g.channels, g.height * g.width));
    let mut dcols = vec![0.0; kk * n];
    if need_dx || need_dw {
        for b in 0..batch {
            im2col(&dy[b * out_len..(b + 1) * out_len], g, &mut dcols);
            if let Some(dx) = dx.as_mut() {
                gemm(
                    in_channels,
                    kk,
                    n,
                    MatRef::row_major(w, kk),
                    MatRef::row_major(&dcols, n),
                    &mut dx[b * in_channels * n..(b + 1) * in_channels * n],
                    false,
                );
            }
            if let Some(dw) = dw.as_mut() {
                let xb = &x[b * in_channels * n..(b + 1) * in_channels * n];
                gemm(
                    in_channels,
                    n,
                    kk,
                    MatRef::row_major(xb, n),
                    MatRef::transposed(&dcols, n),
                    dw,
                    true,
                );
            }
        }
    }
    ConvGrads { dx, dw, db }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (c, b) in bias.iter().enumerate() {
        out[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += b);
    }
}

/// Per-channel sums over batch and space of a `(B, C, plane)` buffer.
fn channel_sums(dy: &[f64], batch: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; channels];
    for b in 0..batch {
        for (c, o) in out.iter_mut().enumerate() {
            let start = (b * channels + c) * plane;
            *o += dy[start..start + plane].iter().sum::<f64>();
        }
    }
    out
}

/// Per-(sample, channel) statistics of an instance normalization.
pub(crate) struct PlaneStats {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn instance_norm_forward(
    x: &[f64],
    channels: usize,
    plane: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, PlaneStats) {
    let planes: Vec<usize> = (0..x.len() / plane).collect();
    let stats: Vec<(f64, f64)> = map_collect(&planes, |&p| {
        let xs = &x[p * plane..(p + 1) * plane];
        let mean = xs.iter().sum::<f64>() / plane as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
        (mean, 1.0 / (var + eps).sqrt())
    });
    let mut out = vec![0.0; x.len()];
    for_each_chunk_mut(&mut out, plane, |p, o| {
        let c = p % channels;
        let (mean, inv) = stats[p];
        let xs = &x[p * plane..(p + 1) * plane];
        for (o, &v) in o.iter_mut().zip(xs) {
            *o = gamma[c] * (v - mean) * inv + beta[c];
        }
    });
    let (mean, inv_std) = stats.into_iter().unzip();
    (out, PlaneStats { mean, inv_std })
}

pub(crate) struct NormGrads {
    pub dx: Option<Vec<f64>>,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
}

pub(crate) fn instance_norm_backward(
    x: &[f64],
    channels: usize,
    plane: usize,
    gamma: &[f64],
    stats: &PlaneStats,
    dy: &[f64],
    need_dx: bool,
) -> NormGrads {
    let n_planes = x.len() / plane;
    let planes: Vec<usize> = (0..n_planes).collect();
    // (sum dy, sum dy * xhat) per plane
    let sums: Vec<(f64, f64)> = map_collect(&planes, |&p| {
        let (mean, inv) = (stats.mean[p], stats.inv_std[p]);
        let xs = &x[p * plane..(p + 1) * plane];
        let ds = &dy[p * plane..(p + 1) * plane];
        xs.iter()
            .zip(ds)
            .fold((0.0, 0.0), |(s, sx), (&v, &d)| (s + d, sx + d * (v - mean) * inv))
    });
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for (p, &(s, sx)) in sums.iter().enumerate() {
        dbeta[p % channels] += s;
        dgamma[p % channels] += sx;
    }
    let dx = need_dx.then(|| {
        let mut dx = vec![0.0; x.len()];
        let n = plane as f64;
        for_each_chunk_mut(&mut dx, plane, |p, out| {
            let c = p % channels;
            let (mean, inv) = (stats.mean[p], stats.inv_std[p]);
            let (s, sx) = sums[p];
            let xs = &x[p * plane..(p + 1) * plane];
            let ds = &dy[p * plane..(p + 1) * plane];
            for ((o, &v), &d) in out.iter_mut().zip(xs).zip(ds) {
                let xhat = (v - mean) * inv;
                *o = gamma[c] * inv * (d - s / n - xhat * sx / n);
            }
        });
        dx
    });
    NormGrads { dx, dgamma, dbeta }
}

/// 2x2 max pooling with stride 2; returns values and the flat input index of
/// each maximum.
pub(crate) fn max_pool2_forward(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    let mut arg = vec![0usize; planes * oh * ow];
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = p * h * w + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = p * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                out[o] = x[best];
                arg[o] = best;
            }
        }
    }
    (out, arg)
}

/// Elementwise map into a fresh buffer.
pub(crate) fn map(x: &[f64], f: impl Fn(f64) -> f64 + Sync + Send) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for_each_chunk_mut(&mut out, MIN_SPLIT, |i, o| {
        let src = &x[i * MIN_SPLIT..i * MIN_SPLIT + o.len()];
        for (o, &v) in o.iter_mut().zip(src) {
            *o = f(v);
        }
    });
    out
}

/// Elementwise binary map into a fresh buffer.
pub(crate) fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64 + Sync + Send) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for_each_chunk_mut(&mut out, MIN_SPLIT, |i, o| {
        let start = i * MIN_SPLIT;
        let (sa, sb) = (&a[start..start + o.len()], &b[start..start + o.len()]);
        for ((o, &u), &v) in o.iter_mut().zip(sa).zip(sb) {
            *o = f(u, v);
        }
    });
    out
}
