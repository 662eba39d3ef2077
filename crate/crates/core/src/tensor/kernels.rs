//! Forward and backward kernels shared by the graph and by inference helpers.
//!
//! All loops run in a fixed order so results are bit-reproducible.

use super::{numel, strides, Tensor};
use crate::error::{bail_shape, Result};

// ── broadcasting ─────────────────────────────────────────────────────

/// Numpy-style broadcast of two shapes (right-aligned).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => bail_shape!("cannot broadcast {a:?} with {b:?}"),
        };
    }
    Ok(out)
}

/// For every flat index of `out_shape`, the flat offset into a tensor of
/// `in_shape` broadcast against it.
pub(crate) fn broadcast_offsets(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let in_strides = strides(in_shape);
    let mut bstrides = vec![0; rank];
    for i in 0..in_shape.len() {
        if in_shape[i] != 1 {
            bstrides[pad + i] = in_strides[i];
        }
    }
    let total = numel(out_shape);
    let mut offsets = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            off += bstrides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            off -= bstrides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    offsets
}

pub(crate) fn binary_forward(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape.clone(), data));
    }
    let shape = broadcast_shape(&a.shape, &b.shape)?;
    let oa = broadcast_offsets(&a.shape, &shape);
    let ob = broadcast_offsets(&b.shape, &shape);
    let data = oa
        .iter()
        .zip(&ob)
        .map(|(&i, &j)| f(a.data[i], b.data[j]))
        .collect();
    Ok(Tensor::from_parts(shape, data))
}

/// Sums `grad` (shaped like the broadcast output) back down to `target` shape.
pub(crate) fn reduce_to(grad: &[f64], out_shape: &[usize], target: &[usize]) -> Tensor {
    if out_shape == target {
        return Tensor::from_parts(target.to_vec(), grad.to_vec());
    }
    let offs = broadcast_offsets(target, out_shape);
    let mut data = vec![0.0; numel(target)];
    for (g, &o) in grad.iter().zip(&offs) {
        data[o] += g;
    }
    Tensor::from_parts(target.to_vec(), data)
}

/// Shape with every axis in `axes` set to 1.
pub(crate) fn reduced_shape(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut out = shape.to_vec();
    for &ax in axes {
        if ax >= shape.len() {
            bail_shape!("axis {ax} out of range for shape {shape:?}");
        }
        out[ax] = 1;
    }
    Ok(out)
}

// ── matmul ───────────────────────────────────────────────────────────

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
    out_shape: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        bail_shape!("matmul needs rank >= 2 operands, got {a:?} and {b:?}");
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        bail_shape!("matmul inner dimensions differ: {a:?} x {b:?}");
    }
    let lead_a = &a[..a.len() - 2];
    let lead_b = &b[..b.len() - 2];
    let shared_rhs = lead_b.is_empty();
    if !shared_rhs && lead_a != lead_b {
        bail_shape!("matmul batch dimensions differ: {a:?} x {b:?}");
    }
    let mut out_shape = lead_a.to_vec();
    out_shape.extend([m, n]);
    Ok(MatmulDims {
        batch: numel(lead_a),
        m,
        k,
        n,
        shared_rhs,
        out_shape,
    })
}

pub(crate) fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = matmul_dims(&a.shape, &b.shape)?;
    let mut out = vec![0.0; d.batch * d.m * d.n];
    for bi in 0..d.batch {
        let a_off = bi * d.m * d.k;
        let b_off = if d.shared_rhs { 0 } else { bi * d.k * d.n };
        let c_off = bi * d.m * d.n;
        for i in 0..d.m {
            let c_row = &mut out[c_off + i * d.n..c_off + (i + 1) * d.n];
            for t in 0..d.k {
                let av = a.data[a_off + i * d.k + t];
                let b_row = &b.data[b_off + t * d.n..b_off + (t + 1) * d.n];
                for (c, &bv) in c_row.iter_mut().zip(b_row) {
                    *c += av * bv;
                }
            }
        }
    }
    Ok(Tensor::from_parts(d.out_shape, out))
}

/// Returns (dA, dB) for C = A·B given dC.
pub(crate) fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    grad: &[f64],
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let d = matmul_dims(&a.shape, &b.shape).expect("validated in forward");
    let mut ga = need_a.then(|| vec![0.0; a.numel()]);
    let mut gb = need_b.then(|| vec![0.0; b.numel()]);
    for bi in 0..d.batch {
        let a_off = bi * d.m * d.k;
        let b_off = if d.shared_rhs { 0 } else { bi * d.k * d.n };
        let c_off = bi * d.m * d.n;
        for i in 0..d.m {
            let g_row = &grad[c_off + i * d.n..c_off + (i + 1) * d.n];
            for t in 0..d.k {
                if let Some(ga) = ga.as_mut() {
                    let b_row = &b.data[b_off + t * d.n..b_off + (t + 1) * d.n];
                    let dot: f64 = g_row.iter().zip(b_row).map(|(g, bv)| g * bv).sum();
                    ga[a_off + i * d.k + t] += dot;
                }
                if let Some(gb) = gb.as_mut() {
                    let av = a.data[a_off + i * d.k + t];
                    let gb_row = &mut gb[b_off + t * d.n..b_off + (t + 1) * d.n];
                    for (acc, &g) in gb_row.iter_mut().zip(g_row) {
                        *acc += av * g;
                    }
                }
            }
        }
    }
    (
        ga.map(|v| Tensor::from_parts(a.shape.clone(), v)),
        gb.map(|v| Tensor::from_parts(b.shape.clone(), v)),
    )
}

// ── layout ───────────────────────────────────────────────────────────

pub(crate) fn permute_offsets(shape: &[usize], perm: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        bail_shape!("invalid permutation {perm:?} for shape {shape:?}");
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let pstrides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = numel(shape);
    let mut offs = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offs.push(off);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            off += pstrides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            off -= pstrides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    Ok((out_shape, offs))
}

/// (outer, axis_len, inner) split of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

// ── softmax ──────────────────────────────────────────────────────────

pub(crate) fn softmax_forward(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = split_axis(&x.shape, axis);
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for t in 0..len {
                max = max.max(x.data[base + t * inner]);
            }
            let mut sum = 0.0;
            for t in 0..len {
                let e = (x.data[base + t * inner] - max).exp();
                out[base + t * inner] = e;
                sum += e;
            }
            for t in 0..len {
                out[base + t * inner] /= sum;
            }
        }
    }
    Tensor::from_parts(x.shape.clone(), out)
}

pub(crate) fn softmax_backward(y: &Tensor, grad: &[f64], axis: usize) -> Tensor {
    let (outer, len, inner) = split_axis(&y.shape, axis);
    let mut out = vec![0.0; y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let dot: f64 = (0..len)
                .map(|t| grad[base + t * inner] * y.data[base + t * inner])
                .sum();
            for t in 0..len {
                let idx = base + t * inner;
                out[idx] = y.data[idx] * (grad[idx] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape.clone(), out)
}

// ── GELU (exact, erf-based) ──────────────────────────────────────────

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

// ── 2-D convolution ──────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub h_out: usize,
    pub w_out: usize,
}

pub(crate) fn conv_dims(x: &[usize], w: &[usize], g: ConvGeometry) -> Result<ConvDims> {
    if x.len() != 4 || w.len() != 4 {
        bail_shape!("conv2d needs [B,C,H,W] input and [Cout,Cin/g,kh,kw] weight, got {x:?} and {w:?}");
    }
    if g.groups == 0 || g.stride == 0 {
        bail_shape!("conv2d stride and groups must be positive");
    }
    let (c_in, c_out) = (x[1], w[0]);
    if c_in % g.groups != 0 || c_out % g.groups != 0 || w[1] * g.groups != c_in {
        bail_shape!(
            "conv2d channel mismatch: input {x:?}, weight {w:?}, groups {}",
            g.groups
        );
    }
    let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
    if h + 2 * g.padding < kh || wd + 2 * g.padding < kw {
        bail_shape!("conv2d kernel {kh}x{kw} larger than padded input {h}x{wd}");
    }
    Ok(ConvDims {
        batch: x[0],
        c_in,
        h,
        w: wd,
        c_out,
        kh,
        kw,
        h_out: (h + 2 * g.padding - kh) / g.stride + 1,
        w_out: (wd + 2 * g.padding - kw) / g.stride + 1,
    })
}

/// Output columns `ox` for which `ox*stride + k - pad` lands inside `[0, len)`.
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    // smallest ox with ox*stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest ox with ox*stride + k - pad <= len - 1
    let hi = if k < len + pad {
        ((len - 1 + pad - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    g: ConvGeometry,
) -> Result<Tensor> {
    let d = conv_dims(&x.shape, &w.shape, g)?;
    if let Some(b) = bias {
        if b.shape != [d.c_out] {
            bail_shape!("conv2d bias {:?} does not match {} output channels", b.shape, d.c_out);
        }
    }
    let cin_g = d.c_in / g.groups;
    let cout_g = d.c_out / g.groups;
    let plane_out = d.h_out * d.w_out;
    let mut out = vec![0.0; d.batch * d.c_out * plane_out];
    for b in 0..d.batch {
        for oc in 0..d.c_out {
            let grp = oc / cout_g;
            let o_base = (b * d.c_out + oc) * plane_out;
            if let Some(bias) = bias {
                out[o_base..o_base + plane_out].fill(bias.data[oc]);
            }
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let i_base = (b * d.c_in + ic) * d.h * d.w;
                for ky in 0..d.kh {
                    let (oy_lo, oy_hi) = valid_range(ky, g.padding, g.stride, d.h, d.h_out);
                    for kx in 0..d.kw {
                        let wv = w.data[((oc * cin_g + icg) * d.kh + ky) * d.kw + kx];
                        let (ox_lo, ox_hi) = valid_range(kx, g.padding, g.stride, d.w, d.w_out);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.padding;
                            let in_row = i_base + iy * d.w;
                            let out_row = o_base + oy * d.w_out;
                            if g.stride == 1 {
                                let ix0 = ox_lo + kx - g.padding;
                                let src = &x.data[in_row + ix0..in_row + ix0 + (ox_hi - ox_lo)];
                                let dst = &mut out[out_row + ox_lo..out_row + ox_hi];
                                for (o, &s) in dst.iter_mut().zip(src) {
                                    *o += wv * s;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * g.stride + kx - g.padding;
                                    out[out_row + ox] += wv * x.data[in_row + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(
        vec![d.batch, d.c_out, d.h_out, d.w_out],
        out,
    ))
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad: &[f64],
    g: ConvGeometry,
    need: [bool; 3],
) -> ConvGrads {
    let d = conv_dims(&x.shape, &w.shape, g).expect("validated in forward");
    let cin_g = d.c_in / g.groups;
    let cout_g = d.c_out / g.groups;
    let plane_out = d.h_out * d.w_out;
    let mut gx = need[0].then(|| vec![0.0; x.numel()]);
    let mut gw = need[1].then(|| vec![0.0; w.numel()]);
    let mut gb = need[2].then(|| vec![0.0; d.c_out]);
    for b in 0..d.batch {
        for oc in 0..d.c_out {
            let grp = oc / cout_g;
            let o_base = (b * d.c_out + oc) * plane_out;
            if let Some(gb) = gb.as_mut() {
                gb[oc] += grad[o_base..o_base + plane_out].iter().sum::<f64>();
            }
            if gx.is_none() && gw.is_none() {
                continue;
            }
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let i_base = (b * d.c_in + ic) * d.h * d.w;
                for ky in 0..d.kh {
                    let (oy_lo, oy_hi) = valid_range(ky, g.padding, g.stride, d.h, d.h_out);
                    for kx in 0..d.kw {
                        let w_idx = ((oc * cin_g + icg) * d.kh + ky) * d.kw + kx;
                        let wv = w.data[w_idx];
                        let (ox_lo, ox_hi) = valid_range(kx, g.padding, g.stride, d.w, d.w_out);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.padding;
                            let in_row = i_base + iy * d.w;
                            let out_row = o_base + oy * d.w_out;
                            for ox in ox_lo..ox_hi {
                                let ix = in_row + ox * g.stride + kx - g.padding;
                                let go = grad[out_row + ox];
                                acc += go * x.data[ix];
                                if let Some(gx) = gx.as_mut() {
                                    gx[ix] += wv * go;
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[w_idx] += acc;
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        input: gx.map(|v| Tensor::from_parts(x.shape.clone(), v)),
        weight: gw.map(|v| Tensor::from_parts(w.shape.clone(), v)),
        bias: gb.map(|v| Tensor::from_parts(vec![d.c_out], v)),
    }
}

// ── bilinear resize (align_corners = false) ──────────────────────────

/// Per output coordinate: (low index, high index, weight of high index).
pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

pub(crate) fn resize_forward(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if x.rank() != 4 {
        bail_shape!("resize needs [B,C,H,W], got {:?}", x.shape);
    }
    if out_h == 0 || out_w == 0 {
        bail_shape!("resize target must be at least 1x1, got {out_h}x{out_w}");
    }
    let (planes, h, w) = (x.shape[0] * x.shape[1], x.shape[2], x.shape[3]);
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(Tensor::from_parts(
        vec![x.shape[0], x.shape[1], out_h, out_w],
        out,
    ))
}

pub(crate) fn resize_backward(in_shape: &[usize], grad: &[f64], out_h: usize, out_w: usize) -> Tensor {
    let (planes, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
    if (h, w) == (out_h, out_w) {
        return Tensor::from_parts(in_shape.to_vec(), grad.to_vec());
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut gx = vec![0.0; planes * h * w];
    let mut gi = grad.iter();
    for p in 0..planes {
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let g = *gi.next().expect("grad sized to output");
                dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += g * (1.0 - fy) * fx;
                dst[y1 * w + x0] += g * fy * (1.0 - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), gx)
}

// ── average pooling (kernel == stride) ───────────────────────────────

pub(crate) fn avg_pool_forward(x: &Tensor, k: usize) -> Result<Tensor> {
    if x.rank() != 4 || k == 0 || x.shape[2] % k != 0 || x.shape[3] % k != 0 {
        bail_shape!("avg pool with kernel {k} on {:?}", x.shape);
    }
    let (planes, h, w) = (x.shape[0] * x.shape[1], x.shape[2], x.shape[3]);
    let (oh, ow) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for y in 0..h {
            for xx in 0..w {
                out[(p * oh + y / k) * ow + xx / k] += x.data[(p * h + y) * w + xx];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= norm);
    Ok(Tensor::from_parts(vec![x.shape[0], x.shape[1], oh, ow], out))
}

pub(crate) fn avg_pool_backward(in_shape: &[usize], grad: &[f64], k: usize) -> Tensor {
    let (planes, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..h {
            for xx in 0..w {
                gx[(p * h + y) * w + xx] = grad[(p * oh + y / k) * ow + xx / k] * norm;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), gx)
}
