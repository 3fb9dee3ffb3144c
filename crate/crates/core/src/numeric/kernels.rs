//! Forward and backward kernels for the tape primitives. These operate on
//! plain arrays and know nothing about the tape.

use crate::error::{Result, SlrError};
use crate::numeric::NdArray;

/// Output shape of a broadcasting binary op. Both operands must have the
/// same rank; each axis must match or be 1 on one side.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(SlrError::dim("broadcast", a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(SlrError::dim("broadcast", a, b)),
        })
        .collect()
}

/// Strides of `shape` expressed in the index space of `out`; broadcast axes
/// get stride 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for ax in (0..shape.len()).rev() {
        strides[ax] = if shape[ax] == out[ax] && out[ax] != 1 {
            acc
        } else {
            0
        };
        acc *= shape[ax];
    }
    strides
}

/// Visit every element of `out` together with the matching offsets into two
/// broadcast operands.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let nd = out.len();
    let total: usize = out.iter().product();
    let inner = out[nd - 1];
    let (ia, ib) = (sa[nd - 1], sb[nd - 1]);
    let mut idx = vec![0usize; nd];
    let mut o = 0;
    while o < total {
        let mut oa = 0;
        let mut ob = 0;
        for ax in 0..nd - 1 {
            oa += idx[ax] * sa[ax];
            ob += idx[ax] * sb[ax];
        }
        for k in 0..inner {
            f(o + k, oa + k * ia, ob + k * ib);
        }
        o += inner;
        for ax in (0..nd - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

pub fn broadcast_binary(a: &NdArray, b: &NdArray, f: impl Fn(f64, f64) -> f64) -> Result<NdArray> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return NdArray::new(a.shape(), data);
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![0.0; out.iter().product()];
    let (da, db) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
    NdArray::new(&out, data)
}

/// Sum `x` down to `shape`, where every axis of `shape` either matches `x`
/// or is 1.
pub fn sum_to(x: &NdArray, shape: &[usize]) -> Result<NdArray> {
    if x.shape() == shape {
        return Ok(x.clone());
    }
    let full = broadcast_shape(x.shape(), shape)?;
    if full != x.shape() {
        return Err(SlrError::dim("sum_to", x.shape(), shape));
    }
    let sx = broadcast_strides(x.shape(), &full);
    let st = broadcast_strides(shape, &full);
    let mut out = NdArray::zeros(shape);
    let od = out.data_mut();
    let xd = x.data();
    for_each_broadcast(&full, &sx, &st, |_, ix, it| od[it] += xd[ix]);
    Ok(out)
}

/// Expand `x` to `shape` by repetition along its size-1 axes.
pub fn broadcast_to(x: &NdArray, shape: &[usize]) -> Result<NdArray> {
    let zero = NdArray::zeros(shape);
    broadcast_binary(&zero, x, |_, v| v)
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for k in 0..chunks {
        let (x, y) = (&a[4 * k..4 * k + 4], &b[4 * k..4 * k + 4]);
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for k in 4 * chunks..n {
        tail += a[k] * b[k];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`.
#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

pub fn matmul(a: &NdArray, b: &NdArray) -> Result<NdArray> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(SlrError::dim("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    NdArray::new(&[m, n], out)
}

pub fn transpose2(a: &NdArray) -> NdArray {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let d = a.data();
    NdArray::from_fn(&[n, m], |o| {
        let (j, i) = (o / m, o % m);
        d[i * n + j]
    })
}

pub fn permute(x: &NdArray, axes: &[usize]) -> Result<NdArray> {
    let nd = x.ndim();
    let mut seen = vec![false; nd];
    if axes.len() != nd
        || axes
            .iter()
            .any(|&a| a >= nd || std::mem::replace(&mut seen[a], true))
    {
        return Err(SlrError::dim("permute", x.shape(), axes));
    }
    let in_shape = x.shape();
    let mut in_strides = vec![1; nd];
    for ax in (0..nd.saturating_sub(1)).rev() {
        in_strides[ax] = in_strides[ax + 1] * in_shape[ax + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let zero = vec![0; nd];
    let mut data = vec![0.0; x.len()];
    let xd = x.data();
    for_each_broadcast(&out_shape, &strides, &zero, |o, i, _| data[o] = xd[i]);
    NdArray::new(&out_shape, data)
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub fn concat(parts: &[&NdArray], axis: usize) -> Result<NdArray> {
    let first = parts
        .first()
        .ok_or_else(|| SlrError::Input("concat of zero arrays".into()))?;
    let nd = first.ndim();
    if axis >= nd {
        return Err(SlrError::dim("concat", first.shape(), &[axis]));
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = 0;
    for p in parts {
        let ok = p.ndim() == nd && (0..nd).all(|a| a == axis || p.shape()[a] == first.shape()[a]);
        if !ok {
            return Err(SlrError::dim("concat", first.shape(), p.shape()));
        }
        out_shape[axis] += p.shape()[axis];
    }
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    NdArray::new(&out_shape, data)
}

/// Split the gradient of a concatenation back into per-part gradients.
pub fn split(grad: &NdArray, sizes: &[usize], axis: usize) -> Vec<NdArray> {
    let shape = grad.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let total = shape[axis];
    let mut offset = 0;
    sizes
        .iter()
        .map(|&sz| {
            let mut s = shape.to_vec();
            s[axis] = sz;
            let mut data = Vec::with_capacity(outer * sz * inner);
            for o in 0..outer {
                let base = (o * total + offset) * inner;
                data.extend_from_slice(&grad.data()[base..base + sz * inner]);
            }
            offset += sz;
            NdArray::new(&s, data).expect("split shape")
        })
        .collect()
}

/// Geometry of a 2-D convolution over `[C_in, H, W]` inputs with weights
/// `[C_out, C_in / groups, kh, kw]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: (usize, usize), padding: (usize, usize), groups: usize) -> Self {
        Conv2dSpec {
            stride,
            padding,
            groups,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let hp = h + 2 * self.padding.0;
        let wp = w + 2 * self.padding.1;
        if hp < kh || wp < kw || self.stride.0 == 0 || self.stride.1 == 0 {
            return None;
        }
        Some(((hp - kh) / self.stride.0 + 1, (wp - kw) / self.stride.1 + 1))
    }
}

struct ConvGeom {
    batch: Option<usize>,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn n(&self) -> usize {
        self.batch.unwrap_or(1)
    }

    fn out_shape(&self) -> Vec<usize> {
        match self.batch {
            Some(n) => vec![n, self.cout, self.ho, self.wo],
            None => vec![self.cout, self.ho, self.wo],
        }
    }
}

/// Accepts `[C, H, W]` or batched `[N, C, H, W]` inputs.
fn conv_geom(x: &[usize], k: &[usize], spec: &Conv2dSpec) -> Result<ConvGeom> {
    let (batch, xs) = match x.len() {
        3 => (None, x),
        4 => (Some(x[0]), &x[1..]),
        _ => return Err(SlrError::dim("conv2d", x, k)),
    };
    if k.len() != 4 || spec.groups == 0 {
        return Err(SlrError::dim("conv2d", x, k));
    }
    let (cin, h, w) = (xs[0], xs[1], xs[2]);
    let (cout, cin_g, kh, kw) = (k[0], k[1], k[2], k[3]);
    if cin % spec.groups != 0 || cout % spec.groups != 0 || cin / spec.groups != cin_g {
        return Err(SlrError::dim("conv2d", x, k));
    }
    let (ho, wo) = spec
        .output_hw(h, w, kh, kw)
        .ok_or_else(|| SlrError::dim("conv2d", x, k))?;
    Ok(ConvGeom {
        batch,
        cin,
        h,
        w,
        cout,
        cin_g,
        cout_g: cout / spec.groups,
        kh,
        kw,
        ho,
        wo,
    })
}

/// Range of output columns whose input column `ow * stride + kj - pad` is
/// inside `[0, w)`.
fn valid_out_range(w: usize, wo: usize, stride: usize, kj: usize, pad: usize) -> (usize, usize) {
    // iw = ow*stride + kj - pad >= 0  =>  ow >= ceil((pad - kj) / stride)
    let lo = if kj >= pad {
        0
    } else {
        (pad - kj).div_ceil(stride)
    };
    // iw < w  =>  ow*stride < w + pad - kj
    let lim = w + pad;
    let hi = if lim <= kj {
        0
    } else {
        (lim - kj).div_ceil(stride).min(wo)
    };
    (lo.min(hi), hi)
}

/// 2-D convolution, optionally grouped, of `[C_in, H, W]` or
/// `[N, C_in, H, W]` with a `[C_out, C_in / groups, kh, kw]` kernel.
pub fn conv2d(x: &NdArray, kernel: &NdArray, spec: &Conv2dSpec) -> Result<NdArray> {
    let g = conv_geom(x.shape(), kernel.shape(), spec)?;
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.ho * g.wo;
    let mut out = vec![0.0; g.n() * out_len];
    for n in 0..g.n() {
        conv2d_one(
            &x.data()[n * in_len..(n + 1) * in_len],
            kernel.data(),
            &mut out[n * out_len..(n + 1) * out_len],
            &g,
            spec,
        );
    }
    NdArray::new(&g.out_shape(), out)
}

fn conv2d_one(xd: &[f64], kd: &[f64], out: &mut [f64], g: &ConvGeom, spec: &Conv2dSpec) {
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    for oc in 0..g.cout {
        let grp = oc / g.cout_g;
        let out_c = &mut out[oc * g.ho * g.wo..(oc + 1) * g.ho * g.wo];
        for icg in 0..g.cin_g {
            let ic = grp * g.cin_g + icg;
            let x_c = &xd[ic * g.h * g.w..(ic + 1) * g.h * g.w];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wv = kd[((oc * g.cin_g + icg) * g.kh + ki) * g.kw + kj];
                    if wv == 0.0 {
                        continue;
                    }
                    let (lo, hi) = valid_out_range(g.w, g.wo, sw, kj, pw);
                    for oh in 0..g.ho {
                        let ih = (oh * sh + ki) as isize - ph as isize;
                        if ih < 0 || ih as usize >= g.h {
                            continue;
                        }
                        let xrow = &x_c[ih as usize * g.w..(ih as usize + 1) * g.w];
                        let orow = &mut out_c[oh * g.wo..(oh + 1) * g.wo];
                        if sw == 1 {
                            let start = lo + kj - pw;
                            for (o, &xv) in orow[lo..hi].iter_mut().zip(&xrow[start..]) {
                                *o += wv * xv;
                            }
                        } else {
                            for ow in lo..hi {
                                orow[ow] += wv * xrow[ow * sw + kj - pw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of `conv2d` with respect to its input and kernel.
pub fn conv2d_backward(
    x: &NdArray,
    kernel: &NdArray,
    grad_out: &NdArray,
    spec: &Conv2dSpec,
) -> Result<(NdArray, NdArray)> {
    let g = conv_geom(x.shape(), kernel.shape(), spec)?;
    if grad_out.shape() != g.out_shape().as_slice() {
        return Err(SlrError::dim(
            "conv2d_backward",
            grad_out.shape(),
            &g.out_shape(),
        ));
    }
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.ho * g.wo;
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; kernel.len()];
    for n in 0..g.n() {
        conv2d_backward_one(
            &x.data()[n * in_len..(n + 1) * in_len],
            kernel.data(),
            &grad_out.data()[n * out_len..(n + 1) * out_len],
            &mut gx[n * in_len..(n + 1) * in_len],
            &mut gk,
            &g,
            spec,
        );
    }
    Ok((
        NdArray::new(x.shape(), gx)?,
        NdArray::new(kernel.shape(), gk)?,
    ))
}

fn conv2d_backward_one(
    xd: &[f64],
    kd: &[f64],
    gd: &[f64],
    gx: &mut [f64],
    gk: &mut [f64],
    g: &ConvGeom,
    spec: &Conv2dSpec,
) {
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    for oc in 0..g.cout {
        let grp = oc / g.cout_g;
        let g_c = &gd[oc * g.ho * g.wo..(oc + 1) * g.ho * g.wo];
        for icg in 0..g.cin_g {
            let ic = grp * g.cin_g + icg;
            let x_c = &xd[ic * g.h * g.w..(ic + 1) * g.h * g.w];
            let gx_c = &mut gx[ic * g.h * g.w..(ic + 1) * g.h * g.w];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let widx = ((oc * g.cin_g + icg) * g.kh + ki) * g.kw + kj;
                    let wv = kd[widx];
                    let (lo, hi) = valid_out_range(g.w, g.wo, sw, kj, pw);
                    if lo >= hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oh in 0..g.ho {
                        let ih = (oh * sh + ki) as isize - ph as isize;
                        if ih < 0 || ih as usize >= g.h {
                            continue;
                        }
                        let ih = ih as usize;
                        let grow = &g_c[oh * g.wo + lo..oh * g.wo + hi];
                        if sw == 1 {
                            let start = ih * g.w + lo + kj - pw;
                            acc += dot(grow, &x_c[start..start + (hi - lo)]);
                            axpy(&mut gx_c[start..start + (hi - lo)], wv, grow);
                        } else {
                            for (k, gv) in grow.iter().enumerate() {
                                let iw = (lo + k) * sw + kj - pw;
                                acc += gv * x_c[ih * g.w + iw];
                                gx_c[ih * g.w + iw] += wv * gv;
                            }
                        }
                    }
                    gk[widx] += acc;
                }
            }
        }
    }
}

struct MixGeom {
    batch: Option<usize>,
    p: usize,
    groups: usize,
    c: usize,
    t: usize,
    v: usize,
}

impl MixGeom {
    fn n(&self) -> usize {
        self.batch.unwrap_or(1)
    }

    fn out_shape(&self) -> Vec<usize> {
        match self.batch {
            Some(n) => vec![n, self.c, self.t, self.v],
            None => vec![self.c, self.t, self.v],
        }
    }
}

fn node_mix_geom(y: &[usize], adj: &[usize]) -> Result<MixGeom> {
    let (batch, ys) = match y.len() {
        3 => (None, y),
        4 => (Some(y[0]), &y[1..]),
        _ => return Err(SlrError::dim("node_mix", y, adj)),
    };
    if adj.len() != 4 {
        return Err(SlrError::dim("node_mix", y, adj));
    }
    let (p, groups, v) = (adj[0], adj[1], adj[2]);
    if adj[3] != v || ys[2] != v || ys[0] % p != 0 || (ys[0] / p) % groups != 0 {
        return Err(SlrError::dim("node_mix", y, adj));
    }
    Ok(MixGeom {
        batch,
        p,
        groups,
        c: ys[0] / p,
        t: ys[1],
        v,
    })
}

/// Per-group adjacency aggregation along the node axis.
///
/// `y` is `[P * C, T, V]` (partition-major channels, optionally with a
/// leading batch axis), `adj` is `[P, G, V, V]` and the result is
/// `[C, T, V]` with
/// `out[c, t, i] = sum_p sum_j adj[p, c / (C / G), i, j] * y[p * C + c, t, j]`.
pub fn node_mix(y: &NdArray, adj: &NdArray) -> Result<NdArray> {
    let g = node_mix_geom(y.shape(), adj.shape())?;
    let (c, t, v) = (g.c, g.t, g.v);
    let cg = c / g.groups;
    let in_len = g.p * c * t * v;
    let out_len = c * t * v;
    let mut out = vec![0.0; g.n() * out_len];
    let ad = adj.data();
    for n in 0..g.n() {
        let yd = &y.data()[n * in_len..(n + 1) * in_len];
        let on = &mut out[n * out_len..(n + 1) * out_len];
        for pi in 0..g.p {
            for ch in 0..c {
                let grp = ch / cg;
                let a = &ad[(pi * g.groups + grp) * v * v..(pi * g.groups + grp + 1) * v * v];
                let yc = &yd[(pi * c + ch) * t * v..(pi * c + ch + 1) * t * v];
                let oc = &mut on[ch * t * v..(ch + 1) * t * v];
                for ti in 0..t {
                    let yrow = &yc[ti * v..(ti + 1) * v];
                    let orow = &mut oc[ti * v..(ti + 1) * v];
                    for (o, arow) in orow.iter_mut().zip(a.chunks_exact(v)) {
                        *o += dot(arow, yrow);
                    }
                }
            }
        }
    }
    NdArray::new(&g.out_shape(), out)
}

pub fn node_mix_backward(
    y: &NdArray,
    adj: &NdArray,
    grad_out: &NdArray,
) -> Result<(NdArray, NdArray)> {
    let g = node_mix_geom(y.shape(), adj.shape())?;
    if grad_out.shape() != g.out_shape().as_slice() {
        return Err(SlrError::dim(
            "node_mix_backward",
            grad_out.shape(),
            &g.out_shape(),
        ));
    }
    let (c, t, v) = (g.c, g.t, g.v);
    let cg = c / g.groups;
    let in_len = g.p * c * t * v;
    let out_len = c * t * v;
    let mut gy = vec![0.0; y.len()];
    let mut ga = vec![0.0; adj.len()];
    let ad = adj.data();
    for n in 0..g.n() {
        let yd = &y.data()[n * in_len..(n + 1) * in_len];
        let gd = &grad_out.data()[n * out_len..(n + 1) * out_len];
        let gyn = &mut gy[n * in_len..(n + 1) * in_len];
        for pi in 0..g.p {
            for ch in 0..c {
                let grp = ch / cg;
                let aoff = (pi * g.groups + grp) * v * v;
                let yoff = (pi * c + ch) * t * v;
                for ti in 0..t {
                    let yrow = &yd[yoff + ti * v..yoff + (ti + 1) * v];
                    let grow = &gd[(ch * t + ti) * v..(ch * t + ti + 1) * v];
                    let gyrow = &mut gyn[yoff + ti * v..yoff + (ti + 1) * v];
                    for (i, &go) in grow.iter().enumerate() {
                        if go == 0.0 {
                            continue;
                        }
                        axpy(gyrow, go, &ad[aoff + i * v..aoff + (i + 1) * v]);
                        axpy(&mut ga[aoff + i * v..aoff + (i + 1) * v], go, yrow);
                    }
                }
            }
        }
    }
    Ok((NdArray::new(y.shape(), gy)?, NdArray::new(adj.shape(), ga)?))
}

/// Standardize each slice `x[l, ...]` over its trailing elements. Returns the
/// normalized array and the per-slice inverse standard deviations.
pub fn standardize(x: &NdArray, lead: usize, eps: f64) -> Result<(NdArray, Vec<f64>, Vec<f64>)> {
    if lead == 0 || !x.len().is_multiple_of(lead) {
        return Err(SlrError::dim("standardize", x.shape(), &[lead]));
    }
    let n = x.len() / lead;
    let mut out = vec![0.0; x.len()];
    let mut means = Vec::with_capacity(lead);
    let mut inv_std = Vec::with_capacity(lead);
    for l in 0..lead {
        let s = &x.data()[l * n..(l + 1) * n];
        let mean = s.iter().sum::<f64>() / n as f64;
        let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        for (o, v) in out[l * n..(l + 1) * n].iter_mut().zip(s) {
            *o = (v - mean) * is;
        }
        means.push(mean);
        inv_std.push(is);
    }
    Ok((NdArray::new(x.shape(), out)?, means, inv_std))
}

pub fn standardize_backward(xhat: &NdArray, inv_std: &[f64], grad_out: &NdArray) -> NdArray {
    let lead = inv_std.len();
    let n = xhat.len() / lead;
    let mut gx = vec![0.0; xhat.len()];
    for l in 0..lead {
        let xs = &xhat.data()[l * n..(l + 1) * n];
        let gs = &grad_out.data()[l * n..(l + 1) * n];
        let mg = gs.iter().sum::<f64>() / n as f64;
        let mgx = gs.iter().zip(xs).map(|(g, x)| g * x).sum::<f64>() / n as f64;
        for ((o, g), x) in gx[l * n..(l + 1) * n].iter_mut().zip(gs).zip(xs) {
            *o = inv_std[l] * (g - mg - x * mgx);
        }
    }
    NdArray::new(xhat.shape(), gx).expect("standardize grad shape")
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn swish(v: f64) -> f64 {
    v * sigmoid(v)
}

pub fn swish_grad(v: f64) -> f64 {
    let s = sigmoid(v);
    s + v * s * (1.0 - s)
}

/// Numerically stable log-softmax over a flat vector.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    log_softmax(z).into_iter().map(f64::exp).collect()
}
