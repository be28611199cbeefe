//! Dense 3D convolution (cross-correlation), instance normalization and the
//! boundary-aware total variation kernel.
//!
//! Inner loops run over the contiguous D axis so they vectorize; accumulation
//! order is fixed per output element regardless of anything else.

use super::{Element, Shape, TensorError};

pub fn conv3d_output_dim(in_size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = in_size + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

pub(crate) fn validate(xs: Shape, ws: Shape, bs: Shape) -> Result<(), TensorError> {
    let k = ws.h();
    if ws.w() != k || ws.d() != k {
        return Err(TensorError::ShapeMismatch {
            context: "conv3d: kernel must be cubic",
            lhs: ws.to_string(),
            rhs: format!("({},{},k,k,k)", ws.n(), ws.c()),
        });
    }
    if xs.c() != ws.c() {
        return Err(TensorError::ShapeMismatch {
            context: "conv3d: input channels vs kernel input channels",
            lhs: xs.to_string(),
            rhs: ws.to_string(),
        });
    }
    if bs.count() != ws.n() {
        return Err(TensorError::ShapeMismatch {
            context: "conv3d: bias length vs output channels",
            lhs: bs.to_string(),
            rhs: ws.to_string(),
        });
    }
    Ok(())
}

/// Valid output index range along one axis for kernel offset `k_off`:
/// all `o` with `0 <= o*stride - pad + k_off < in_size`.
#[inline]
fn valid_range(in_size: usize, out_size: usize, k_off: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k_off { (pad - k_off + stride - 1) / stride } else { 0 };
    let hi_in = in_size + pad;
    let hi = if hi_in > k_off { ((hi_in - k_off - 1) / stride + 1).min(out_size) } else { 0 };
    (lo.min(hi), hi)
}

pub(crate) fn forward<T: Element>(
    x: &[T],
    xs: Shape,
    w: &[T],
    ws: Shape,
    b: &[T],
    stride: usize,
    pad: usize,
) -> Result<(Vec<T>, Shape), TensorError> {
    let [n_batch, c_in, h, wd, d] = xs.0;
    let (c_out, k) = (ws.n(), ws.h());
    let (oh, ow, od) = match (
        conv3d_output_dim(h, k, stride, pad),
        conv3d_output_dim(wd, k, stride, pad),
        conv3d_output_dim(d, k, stride, pad),
    ) {
        (Some(a), Some(b2), Some(c)) => (a, b2, c),
        _ => {
            return Err(TensorError::ShapeMismatch {
                context: "conv3d: kernel larger than padded input",
                lhs: xs.to_string(),
                rhs: ws.to_string(),
            })
        }
    };
    let out_shape = Shape::new(n_batch, c_out, oh, ow, od);
    let mut out = vec![T::zero(); out_shape.count()];
    let in_sp = h * wd * d;
    let out_sp = oh * ow * od;

    for n in 0..n_batch {
        for co in 0..c_out {
            let out_nc = &mut out[(n * c_out + co) * out_sp..(n * c_out + co + 1) * out_sp];
            out_nc.fill(b[co]);
            for ci in 0..c_in {
                let x_nc = &x[(n * c_in + ci) * in_sp..(n * c_in + ci + 1) * in_sp];
                let w_base = ((co * c_in + ci) * k * k) * k;
                for kh in 0..k {
                    let (h_lo, h_hi) = valid_range(h, oh, kh, stride, pad);
                    for kw in 0..k {
                        let (w_lo, w_hi) = valid_range(wd, ow, kw, stride, pad);
                        for kd in 0..k {
                            let (d_lo, d_hi) = valid_range(d, od, kd, stride, pad);
                            if d_lo >= d_hi {
                                continue;
                            }
                            let wv = w[w_base + (kh * k + kw) * k + kd];
                            for p in h_lo..h_hi {
                                let ih = p * stride + kh - pad;
                                for q in w_lo..w_hi {
                                    let iw = q * stride + kw - pad;
                                    let dst = &mut out_nc[(p * ow + q) * od + d_lo..(p * ow + q) * od + d_hi];
                                    if stride == 1 {
                                        let src_off = iw * d + d_lo + kd - pad;
                                        let src = &x_nc[ih * wd * d + src_off..ih * wd * d + src_off + (d_hi - d_lo)];
                                        for (o, &v) in dst.iter_mut().zip(src) {
                                            *o += wv * v;
                                        }
                                    } else {
                                        let row = ih * wd * d + iw * d;
                                        for (off, o) in dst.iter_mut().enumerate() {
                                            let r = d_lo + off;
                                            *o += wv * x_nc[row + r * stride + kd - pad];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((out, out_shape))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_input<T: Element>(
    dx: &mut [T],
    xs: Shape,
    w: &[T],
    ws: Shape,
    g: &[T],
    gs: Shape,
    stride: usize,
    pad: usize,
) {
    let [n_batch, c_in, h, wd, d] = xs.0;
    let (c_out, k) = (ws.n(), ws.h());
    let (oh, ow, od) = (gs.h(), gs.w(), gs.d());
    let in_sp = h * wd * d;
    let out_sp = oh * ow * od;

    for n in 0..n_batch {
        for ci in 0..c_in {
            let dx_nc = &mut dx[(n * c_in + ci) * in_sp..(n * c_in + ci + 1) * in_sp];
            for co in 0..c_out {
                let g_nc = &g[(n * c_out + co) * out_sp..(n * c_out + co + 1) * out_sp];
                let w_base = ((co * c_in + ci) * k * k) * k;
                for kh in 0..k {
                    let (h_lo, h_hi) = valid_range(h, oh, kh, stride, pad);
                    for kw in 0..k {
                        let (w_lo, w_hi) = valid_range(wd, ow, kw, stride, pad);
                        for kd in 0..k {
                            let (d_lo, d_hi) = valid_range(d, od, kd, stride, pad);
                            if d_lo >= d_hi {
                                continue;
                            }
                            let wv = w[w_base + (kh * k + kw) * k + kd];
                            for p in h_lo..h_hi {
                                let ih = p * stride + kh - pad;
                                for q in w_lo..w_hi {
                                    let iw = q * stride + kw - pad;
                                    let src = &g_nc[(p * ow + q) * od + d_lo..(p * ow + q) * od + d_hi];
                                    if stride == 1 {
                                        let dst_off = ih * wd * d + iw * d + d_lo + kd - pad;
                                        let dst = &mut dx_nc[dst_off..dst_off + (d_hi - d_lo)];
                                        for (o, &v) in dst.iter_mut().zip(src) {
                                            *o += wv * v;
                                        }
                                    } else {
                                        let row = ih * wd * d + iw * d;
                                        for (off, &v) in src.iter().enumerate() {
                                            let r = d_lo + off;
                                            dx_nc[row + r * stride + kd - pad] += wv * v;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_weight<T: Element>(
    dw: &mut [T],
    ws: Shape,
    x: &[T],
    xs: Shape,
    g: &[T],
    gs: Shape,
    stride: usize,
    pad: usize,
) {
    let [n_batch, c_in, h, wd, d] = xs.0;
    let (c_out, k) = (ws.n(), ws.h());
    let (oh, ow, od) = (gs.h(), gs.w(), gs.d());
    let in_sp = h * wd * d;
    let out_sp = oh * ow * od;

    for co in 0..c_out {
        for ci in 0..c_in {
            let w_base = ((co * c_in + ci) * k * k) * k;
            for kh in 0..k {
                let (h_lo, h_hi) = valid_range(h, oh, kh, stride, pad);
                for kw in 0..k {
                    let (w_lo, w_hi) = valid_range(wd, ow, kw, stride, pad);
                    for kd in 0..k {
                        let (d_lo, d_hi) = valid_range(d, od, kd, stride, pad);
                        if d_lo >= d_hi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for n in 0..n_batch {
                            let x_nc = &x[(n * c_in + ci) * in_sp..(n * c_in + ci + 1) * in_sp];
                            let g_nc = &g[(n * c_out + co) * out_sp..(n * c_out + co + 1) * out_sp];
                            for p in h_lo..h_hi {
                                let ih = p * stride + kh - pad;
                                for q in w_lo..w_hi {
                                    let iw = q * stride + kw - pad;
                                    let grow = &g_nc[(p * ow + q) * od + d_lo..(p * ow + q) * od + d_hi];
                                    if stride == 1 {
                                        let x_off = ih * wd * d + iw * d + d_lo + kd - pad;
                                        let xrow = &x_nc[x_off..x_off + (d_hi - d_lo)];
                                        acc += dot(grow, xrow);
                                    } else {
                                        let row = ih * wd * d + iw * d;
                                        for (off, &gv) in grow.iter().enumerate() {
                                            let r = d_lo + off;
                                            acc += gv * x_nc[row + r * stride + kd - pad];
                                        }
                                    }
                                }
                            }
                        }
                        dw[w_base + (kh * k + kw) * k + kd] += acc;
                    }
                }
            }
        }
    }
}

pub(crate) fn backward_bias<T: Element>(db: &mut [T], g: &[T], gs: Shape) {
    let (n_batch, c_out, out_sp) = (gs.n(), gs.c(), gs.spatial_count());
    for n in 0..n_batch {
        for co in 0..c_out {
            let g_nc = &g[(n * c_out + co) * out_sp..(n * c_out + co + 1) * out_sp];
            let mut acc = T::zero();
            for &v in g_nc {
                acc += v;
            }
            db[co] += acc;
        }
    }
}

/// Fixed-order four-lane dot product (deterministic, vectorizable).
#[inline]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut tail = T::zero();
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

// ---------------------------------------------------------------------------
// Instance normalization

pub(crate) fn instance_norm_forward<T: Element>(x: &[T], xs: Shape, eps: f64) -> Vec<T> {
    let sp = xs.spatial_count();
    let eps = T::from_f64(eps);
    let inv_sp = T::one() / T::from_f64(sp as f64);
    let mut out = vec![T::zero(); x.len()];
    for nc in 0..xs.n() * xs.c() {
        let src = &x[nc * sp..(nc + 1) * sp];
        let dst = &mut out[nc * sp..(nc + 1) * sp];
        let mut mean = T::zero();
        for &v in src {
            mean += v;
        }
        mean *= inv_sp;
        let mut var = T::zero();
        for &v in src {
            let dv = v - mean;
            var += dv * dv;
        }
        var *= inv_sp;
        let inv_std = T::one() / (var + eps).sqrt();
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = (v - mean) * inv_std;
        }
    }
    out
}

pub(crate) fn instance_norm_backward<T: Element>(
    x: &[T],
    y: &[T],
    xs: Shape,
    eps: f64,
    g: &[T],
    dx: &mut [T],
) {
    let sp = xs.spatial_count();
    let eps = T::from_f64(eps);
    let inv_sp = T::one() / T::from_f64(sp as f64);
    for nc in 0..xs.n() * xs.c() {
        let xr = &x[nc * sp..(nc + 1) * sp];
        let yr = &y[nc * sp..(nc + 1) * sp];
        let gr = &g[nc * sp..(nc + 1) * sp];
        let dr = &mut dx[nc * sp..(nc + 1) * sp];

        let mut mean = T::zero();
        for &v in xr {
            mean += v;
        }
        mean *= inv_sp;
        let mut var = T::zero();
        for &v in xr {
            let dv = v - mean;
            var += dv * dv;
        }
        var *= inv_sp;
        let inv_std = T::one() / (var + eps).sqrt();

        let mut g_mean = T::zero();
        let mut gy_mean = T::zero();
        for (&gv, &yv) in gr.iter().zip(yr) {
            g_mean += gv;
            gy_mean += gv * yv;
        }
        g_mean *= inv_sp;
        gy_mean *= inv_sp;
        for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
            *d += inv_std * (gv - g_mean - yv * gy_mean);
        }
    }
}

// ---------------------------------------------------------------------------
// Boundary-aware total variation

/// Forward differences along each axis evaluated on boundary voxels;
/// neighbors outside the volume contribute zero. Per-sample value optionally
/// normalized by the boundary voxel count, then averaged over the batch.
pub(crate) fn boundary_tv_forward<T: Element>(x: &[T], xs: Shape, boundary: &[T], normalize: bool) -> T {
    let [n_batch, c, h, w, d] = xs.0;
    let sp = h * w * d;
    let half = T::from_f64(0.5);
    let mut total = T::zero();
    for n in 0..n_batch {
        let b_n = &boundary[n * sp..(n + 1) * sp];
        let mut count = T::zero();
        for &m in b_n {
            if m > half {
                count += T::one();
            }
        }
        let mut acc = T::zero();
        for ch in 0..c {
            let x_nc = &x[(n * c + ch) * sp..(n * c + ch + 1) * sp];
            for i in 0..h {
                for j in 0..w {
                    for k in 0..d {
                        let idx = (i * w + j) * d + k;
                        if b_n[idx] <= half {
                            continue;
                        }
                        let v = x_nc[idx];
                        if i + 1 < h {
                            acc += (x_nc[idx + w * d] - v).abs();
                        }
                        if j + 1 < w {
                            acc += (x_nc[idx + d] - v).abs();
                        }
                        if k + 1 < d {
                            acc += (x_nc[idx + 1] - v).abs();
                        }
                    }
                }
            }
        }
        if normalize {
            if count > T::zero() {
                total += acc / count;
            }
        } else {
            total += acc;
        }
    }
    total / T::from_f64(n_batch as f64)
}

pub(crate) fn boundary_tv_backward<T: Element>(
    x: &[T],
    xs: Shape,
    boundary: &[T],
    normalize: bool,
    g: T,
    dx: &mut [T],
) {
    let [n_batch, c, h, w, d] = xs.0;
    let sp = h * w * d;
    let half = T::from_f64(0.5);
    let batch_inv = T::one() / T::from_f64(n_batch as f64);
    for n in 0..n_batch {
        let b_n = &boundary[n * sp..(n + 1) * sp];
        let mut count = T::zero();
        for &m in b_n {
            if m > half {
                count += T::one();
            }
        }
        let scale = if normalize {
            if count > T::zero() {
                g * batch_inv / count
            } else {
                continue;
            }
        } else {
            g * batch_inv
        };
        for ch in 0..c {
            let base = (n * c + ch) * sp;
            for i in 0..h {
                for j in 0..w {
                    for k in 0..d {
                        let idx = (i * w + j) * d + k;
                        if b_n[idx] <= half {
                            continue;
                        }
                        let v = x[base + idx];
                        let mut route = |nb: usize| {
                            let diff = x[base + nb] - v;
                            let s = if diff > T::zero() {
                                T::one()
                            } else if diff < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            };
                            dx[base + nb] += scale * s;
                            dx[base + idx] -= scale * s;
                        };
                        if i + 1 < h {
                            route(idx + w * d);
                        }
                        if j + 1 < w {
                            route(idx + d);
                        }
                        if k + 1 < d {
                            route(idx + 1);
                        }
                    }
                }
            }
        }
    }
}
