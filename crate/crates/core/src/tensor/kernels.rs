//! Elementwise, reduction and structural kernels.

use super::{BinaryKind, Element, ReduceKind, Shape, UnaryKind};

pub(crate) fn unary_forward<T: Element>(kind: UnaryKind, x: &[T]) -> Vec<T> {
    match kind {
        UnaryKind::LeakyRelu(slope) => {
            let s = T::from_f64(slope);
            x.iter().map(|&v| if v > T::zero() { v } else { s * v }).collect()
        }
        UnaryKind::Sigmoid => x
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect(),
        UnaryKind::Scale(c) => {
            let c = T::from_f64(c);
            x.iter().map(|&v| c * v).collect()
        }
        UnaryKind::AddScalar(c) => {
            let c = T::from_f64(c);
            x.iter().map(|&v| v + c).collect()
        }
        UnaryKind::Sqrt => x.iter().map(|&v| v.sqrt()).collect(),
        UnaryKind::Abs => x.iter().map(|&v| v.abs()).collect(),
        UnaryKind::Clamp01 => x
            .iter()
            .map(|&v| v.max(T::zero()).min(T::one()))
            .collect(),
    }
}

pub(crate) fn unary_backward<T: Element>(kind: UnaryKind, x: &[T], y: &[T], g: &[T], dx: &mut [T]) {
    match kind {
        UnaryKind::LeakyRelu(slope) => {
            let s = T::from_f64(slope);
            for ((d, &xv), &gv) in dx.iter_mut().zip(x).zip(g) {
                *d += if xv > T::zero() { gv } else { s * gv };
            }
        }
        UnaryKind::Sigmoid => {
            for ((d, &yv), &gv) in dx.iter_mut().zip(y).zip(g) {
                *d += gv * yv * (T::one() - yv);
            }
        }
        UnaryKind::Scale(c) => {
            let c = T::from_f64(c);
            for (d, &gv) in dx.iter_mut().zip(g) {
                *d += c * gv;
            }
        }
        UnaryKind::AddScalar(_) => {
            for (d, &gv) in dx.iter_mut().zip(g) {
                *d += gv;
            }
        }
        UnaryKind::Sqrt => {
            let half = T::from_f64(0.5);
            for ((d, &yv), &gv) in dx.iter_mut().zip(y).zip(g) {
                *d += gv * half / yv;
            }
        }
        UnaryKind::Abs => {
            for ((d, &xv), &gv) in dx.iter_mut().zip(x).zip(g) {
                let s = if xv > T::zero() {
                    T::one()
                } else if xv < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                *d += gv * s;
            }
        }
        UnaryKind::Clamp01 => {
            for ((d, &xv), &gv) in dx.iter_mut().zip(x).zip(g) {
                if xv >= T::zero() && xv <= T::one() {
                    *d += gv;
                }
            }
        }
    }
}

#[inline]
fn apply<T: Element>(kind: BinaryKind, a: T, b: T) -> T {
    match kind {
        BinaryKind::Add => a + b,
        BinaryKind::Sub => a - b,
        BinaryKind::Mul => a * b,
        BinaryKind::Div => a / b,
    }
}

pub(crate) fn binary_forward<T: Element>(
    kind: BinaryKind,
    sa: Shape,
    a: &[T],
    sb: Shape,
    b: &[T],
    out_shape: Shape,
) -> Vec<T> {
    if sa == sb {
        return a.iter().zip(b).map(|(&x, &y)| apply(kind, x, y)).collect();
    }
    let mut out = vec![T::zero(); out_shape.count()];
    let stra = broadcast_strides(sa, out_shape);
    let strb = broadcast_strides(sb, out_shape);
    let [on, oc, oh, ow, od] = out_shape.0;
    let mut idx = 0usize;
    for n in 0..on {
        for c in 0..oc {
            for h in 0..oh {
                for w in 0..ow {
                    let base_a = n * stra[0] + c * stra[1] + h * stra[2] + w * stra[3];
                    let base_b = n * strb[0] + c * strb[1] + h * strb[2] + w * strb[3];
                    for d in 0..od {
                        out[idx] =
                            apply(kind, a[base_a + d * stra[4]], b[base_b + d * strb[4]]);
                        idx += 1;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn binary_backward<T: Element>(
    kind: BinaryKind,
    sa: Shape,
    a: &[T],
    sb: Shape,
    b: &[T],
    out_shape: Shape,
    g: &[T],
    mut da: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let stra = broadcast_strides(sa, out_shape);
    let strb = broadcast_strides(sb, out_shape);
    let [on, oc, oh, ow, od] = out_shape.0;
    let mut idx = 0usize;
    for n in 0..on {
        for c in 0..oc {
            for h in 0..oh {
                for w in 0..ow {
                    let base_a = n * stra[0] + c * stra[1] + h * stra[2] + w * stra[3];
                    let base_b = n * strb[0] + c * strb[1] + h * strb[2] + w * strb[3];
                    for d in 0..od {
                        let ia = base_a + d * stra[4];
                        let ib = base_b + d * strb[4];
                        let gv = g[idx];
                        match kind {
                            BinaryKind::Add => {
                                if let Some(da) = da.as_deref_mut() {
                                    da[ia] += gv;
                                }
                                if let Some(db) = db.as_deref_mut() {
                                    db[ib] += gv;
                                }
                            }
                            BinaryKind::Sub => {
                                if let Some(da) = da.as_deref_mut() {
                                    da[ia] += gv;
                                }
                                if let Some(db) = db.as_deref_mut() {
                                    db[ib] -= gv;
                                }
                            }
                            BinaryKind::Mul => {
                                if let Some(da) = da.as_deref_mut() {
                                    da[ia] += gv * b[ib];
                                }
                                if let Some(db) = db.as_deref_mut() {
                                    db[ib] += gv * a[ia];
                                }
                            }
                            BinaryKind::Div => {
                                let inv = T::one() / b[ib];
                                if let Some(da) = da.as_deref_mut() {
                                    da[ia] += gv * inv;
                                }
                                if let Some(db) = db.as_deref_mut() {
                                    db[ib] -= gv * a[ia] * inv * inv;
                                }
                            }
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Strides into `shape` when iterated with `out_shape` indices; broadcast
/// (size-1) axes get stride 0.
fn broadcast_strides(shape: Shape, out_shape: Shape) -> [usize; 5] {
    let natural = shape.strides();
    let mut out = [0usize; 5];
    for a in 0..5 {
        out[a] = if shape.0[a] == out_shape.0[a] { natural[a] } else { 0 };
    }
    out
}

pub(crate) fn reduce_forward<T: Element>(
    kind: ReduceKind,
    x: &[T],
    xs: Shape,
    axes: [bool; 5],
) -> (Vec<T>, Shape) {
    let mut out_dims = xs.0;
    let mut reduced_count = 1usize;
    for a in 0..5 {
        if axes[a] {
            reduced_count *= xs.0[a];
            out_dims[a] = 1;
        }
    }
    let out_shape = Shape(out_dims);
    let init = match kind {
        ReduceKind::Sum | ReduceKind::Mean => T::zero(),
        ReduceKind::Max => T::neg_infinity(),
    };
    let mut out = vec![init; out_shape.count()];
    let ostr = out_shape.strides();
    let [xn, xc, xh, xw, xd] = xs.0;
    let mut idx = 0usize;
    for n in 0..xn {
        for c in 0..xc {
            for h in 0..xh {
                for w in 0..xw {
                    let base = map_idx(n, c, h, w, axes, ostr);
                    for d in 0..xd {
                        let o = base + if axes[4] { 0 } else { d * ostr[4] };
                        let v = x[idx];
                        match kind {
                            ReduceKind::Sum | ReduceKind::Mean => out[o] += v,
                            ReduceKind::Max => {
                                if v > out[o] {
                                    out[o] = v;
                                }
                            }
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
    if kind == ReduceKind::Mean {
        let inv = T::one() / T::from_f64(reduced_count as f64);
        for v in &mut out {
            *v *= inv;
        }
    }
    (out, out_shape)
}

#[inline]
fn map_idx(n: usize, c: usize, h: usize, w: usize, axes: [bool; 5], ostr: [usize; 5]) -> usize {
    (if axes[0] { 0 } else { n * ostr[0] })
        + (if axes[1] { 0 } else { c * ostr[1] })
        + (if axes[2] { 0 } else { h * ostr[2] })
        + (if axes[3] { 0 } else { w * ostr[3] })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn reduce_backward<T: Element>(
    kind: ReduceKind,
    x: &[T],
    xs: Shape,
    y: &[T],
    ys: Shape,
    axes: [bool; 5],
    g: &[T],
    dx: &mut [T],
) {
    let mut reduced_count = 1usize;
    for a in 0..5 {
        if axes[a] {
            reduced_count *= xs.0[a];
        }
    }
    let ostr = ys.strides();
    let [xn, xc, xh, xw, xd] = xs.0;
    // Max routes gradient to the first-encountered argmax in index order.
    let mut routed = vec![false; y.len()];
    let inv = T::one() / T::from_f64(reduced_count as f64);
    let mut idx = 0usize;
    for n in 0..xn {
        for c in 0..xc {
            for h in 0..xh {
                for w in 0..xw {
                    let base = map_idx(n, c, h, w, axes, ostr);
                    for d in 0..xd {
                        let o = base + if axes[4] { 0 } else { d * ostr[4] };
                        match kind {
                            ReduceKind::Sum => dx[idx] += g[o],
                            ReduceKind::Mean => dx[idx] += g[o] * inv,
                            ReduceKind::Max => {
                                if !routed[o] && x[idx] == y[o] {
                                    routed[o] = true;
                                    dx[idx] += g[o];
                                }
                            }
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

pub(crate) fn concat_channels_forward<T: Element>(parts: &[(Shape, &[T])], out_shape: Shape) -> Vec<T> {
    let spatial = out_shape.spatial_count();
    let mut out = vec![T::zero(); out_shape.count()];
    for n in 0..out_shape.n() {
        let mut c_off = 0usize;
        for &(s, data) in parts {
            let block = s.c() * spatial;
            let src = &data[n * block..(n + 1) * block];
            let dst_start = (n * out_shape.c() + c_off) * spatial;
            out[dst_start..dst_start + block].copy_from_slice(src);
            c_off += s.c();
        }
    }
    out
}

pub(crate) fn concat_channels_backward<T: Element>(
    g: &[T],
    out_shape: Shape,
    c_off: usize,
    part_shape: Shape,
    dx: &mut [T],
) {
    let spatial = out_shape.spatial_count();
    let block = part_shape.c() * spatial;
    for n in 0..out_shape.n() {
        let src_start = (n * out_shape.c() + c_off) * spatial;
        let dst = &mut dx[n * block..(n + 1) * block];
        for (d, s) in dst.iter_mut().zip(&g[src_start..src_start + block]) {
            *d += *s;
        }
    }
}

pub(crate) fn upsample2_forward<T: Element>(x: &[T], xs: Shape) -> (Vec<T>, Shape) {
    let [n, c, h, w, d] = xs.0;
    let out_shape = Shape::new(n, c, 2 * h, 2 * w, 2 * d);
    let mut out = vec![T::zero(); out_shape.count()];
    let mut idx = 0usize;
    for nc in 0..n * c {
        let src = &x[nc * h * w * d..(nc + 1) * h * w * d];
        for oh in 0..2 * h {
            for ow in 0..2 * w {
                let row = ((oh / 2) * w + ow / 2) * d;
                for od in 0..2 * d {
                    out[idx] = src[row + od / 2];
                    idx += 1;
                }
            }
        }
    }
    (out, out_shape)
}

pub(crate) fn upsample2_backward<T: Element>(g: &[T], gs: Shape, xs: Shape, dx: &mut [T]) {
    let [n, c, h, w, d] = xs.0;
    let mut idx = 0usize;
    for nc in 0..n * c {
        let dst = &mut dx[nc * h * w * d..(nc + 1) * h * w * d];
        for oh in 0..gs.h() {
            for ow in 0..gs.w() {
                let row = ((oh / 2) * w + ow / 2) * d;
                for od in 0..gs.d() {
                    dst[row + od / 2] += g[idx];
                    idx += 1;
                }
            }
        }
    }
}

pub(crate) fn avg_pool2_forward<T: Element>(x: &[T], xs: Shape) -> (Vec<T>, Shape) {
    let [n, c, h, w, d] = xs.0;
    let (oh, ow, od) = (h / 2, w / 2, d / 2);
    let out_shape = Shape::new(n, c, oh, ow, od);
    let mut out = vec![T::zero(); out_shape.count()];
    let eighth = T::from_f64(0.125);
    let mut idx = 0usize;
    for nc in 0..n * c {
        let src = &x[nc * h * w * d..(nc + 1) * h * w * d];
        for i in 0..oh {
            for j in 0..ow {
                for k in 0..od {
                    let mut acc = T::zero();
                    for di in 0..2 {
                        for dj in 0..2 {
                            for dk in 0..2 {
                                acc += src[((2 * i + di) * w + 2 * j + dj) * d + 2 * k + dk];
                            }
                        }
                    }
                    out[idx] = acc * eighth;
                    idx += 1;
                }
            }
        }
    }
    (out, out_shape)
}

pub(crate) fn avg_pool2_backward<T: Element>(g: &[T], gs: Shape, xs: Shape, dx: &mut [T]) {
    let [n, c, h, w, d] = xs.0;
    let (oh, ow, od) = (gs.h(), gs.w(), gs.d());
    let eighth = T::from_f64(0.125);
    let mut idx = 0usize;
    for nc in 0..n * c {
        let dst = &mut dx[nc * h * w * d..(nc + 1) * h * w * d];
        for i in 0..oh {
            for j in 0..ow {
                for k in 0..od {
                    let gv = g[idx] * eighth;
                    for di in 0..2 {
                        for dj in 0..2 {
                            for dk in 0..2 {
                                dst[((2 * i + di) * w + 2 * j + dj) * d + 2 * k + dk] += gv;
                            }
                        }
                    }
                    idx += 1;
                }
            }
        }
    }
}
