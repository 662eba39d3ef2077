//! Scalar loop implementations used as independent oracles.
#![allow(dead_code)]

use scaseg_core::decoder::ScaStage;
use scaseg_core::nn::{Conv2d, LayerNorm, Linear, MixFfn, MultiHeadAttention, ParamStore};
use scaseg_core::tensor::ConvGeometry;
use scaseg_core::Tensor;

pub type Rows = Vec<Vec<f64>>;

/// Batch element `b` of a `[B, N, C]` tensor.
pub fn rows_of(t: &Tensor, b: usize) -> Rows {
    let (n, c) = (t.shape()[1], t.shape()[2]);
    (0..n).map(|i| (0..c).map(|j| t.at(&[b, i, j])).collect()).collect()
}

pub fn rows_to_tensor(rows: &Rows) -> Tensor {
    let (n, c) = (rows.len(), rows[0].len());
    Tensor::from_fn(&[1, n, c], |i| rows[i / c][i % c])
}

pub fn max_diff(a: &Rows, b: &Rows) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn add_rows(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn layer_norm(x: &Rows, ln: &LayerNorm, store: &ParamStore) -> Rows {
    let (g, b) = (store.get(ln.gamma).data(), store.get(ln.beta).data());
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-6).sqrt();
            row.iter().enumerate().map(|(c, v)| (v - mean) * inv * g[c] + b[c]).collect()
        })
        .collect()
}

pub fn linear(x: &Rows, lin: &Linear, store: &ParamStore) -> Rows {
    let w = store.get(lin.weight);
    x.iter()
        .map(|row| {
            (0..lin.out_dim)
                .map(|o| {
                    let mut acc = lin.bias.map_or(0.0, |b| store.get(b).data()[o]);
                    for (i, v) in row.iter().enumerate() {
                        acc += v * w.at(&[i, o]);
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// `softmax(QKᵀ/√d_k)V` per head with explicit loops, then the output projection.
pub fn mha(kv: &Rows, q: &Rows, attn: &MultiHeadAttention, store: &ParamStore) -> Rows {
    let qp = linear(q, &attn.q_proj, store);
    let kp = linear(kv, &attn.k_proj, store);
    let vp = linear(kv, &attn.v_proj, store);
    let (h, dk) = (attn.cfg.heads, attn.head_dim());
    let mut mixed = vec![vec![0.0; h * dk]; q.len()];
    for head in 0..h {
        let off = head * dk;
        for (i, qi) in qp.iter().enumerate() {
            let scores: Vec<f64> = kp
                .iter()
                .map(|kj| (0..dk).map(|d| qi[off + d] * kj[off + d]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (j, vj) in vp.iter().enumerate() {
                for d in 0..dk {
                    mixed[i][off + d] += exps[j] / z * vj[off + d];
                }
            }
        }
    }
    linear(&mixed, &attn.out_proj, store)
}

pub struct ConvOut {
    pub out: Tensor,
    /// Multiply-accumulates performed, including taps that land in padding.
    pub macs: u64,
}

/// Direct convolution over `[B, C, H, W]`.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: ConvGeometry) -> ConvOut {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cpg, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let ho = (h + 2 * g.padding - k) / g.stride + 1;
    let wo = (wd + 2 * g.padding - k) / g.stride + 1;
    let opg = cout / g.groups;
    assert_eq!(cpg * g.groups, cin);
    let mut out = Tensor::zeros(&[b, cout, ho, wo]);
    let mut macs = 0u64;
    for n in 0..b {
        for o in 0..cout {
            let grp = o / opg;
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = bias.map_or(0.0, |t| t.data()[o]);
                    for ci in 0..cpg {
                        for ky in 0..k {
                            for kx in 0..k {
                                macs += 1;
                                let iy = (y * g.stride + ky) as isize - g.padding as isize;
                                let ix = (xo * g.stride + kx) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at(&[o, ci, ky, kx])
                                    * x.at(&[n, grp * cpg + ci, iy as usize, ix as usize]);
                            }
                        }
                    }
                    let i = ((n * cout + o) * ho + y) * wo + xo;
                    out.data_mut()[i] = acc;
                }
            }
        }
    }
    ConvOut { out, macs }
}

pub fn conv_layer(x: &Tensor, conv: &Conv2d, store: &ParamStore) -> Tensor {
    conv2d(x, store.get(conv.weight), Some(store.get(conv.bias)), conv.geom).out
}

/// Tokens (`N x C`, row-major on `grid`) to a `[1, C, h, w]` map and back.
pub fn rows_to_map(x: &Rows, grid: (usize, usize)) -> Tensor {
    let c = x[0].len();
    let n = grid.0 * grid.1;
    Tensor::from_fn(&[1, c, grid.0, grid.1], |i| x[i % n][i / n])
}

pub fn map_to_rows(t: &Tensor) -> Rows {
    let (c, h, w) = (t.shape()[1], t.shape()[2], t.shape()[3]);
    (0..h * w)
        .map(|p| (0..c).map(|ch| t.at(&[0, ch, p / w, p % w])).collect())
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn mix_ffn(x: &Rows, grid: (usize, usize), ffn: &MixFfn, store: &ParamStore) -> Rows {
    let m = rows_to_map(x, grid);
    let m = conv_layer(&m, &ffn.fc1, store);
    let m = conv_layer(&m, &ffn.dwconv, store).map(gelu);
    let m = conv_layer(&m, &ffn.fc2, store);
    map_to_rows(&m)
}

/// `A = MHA(LN(kv), LN(q)) + q`, `S = FFN(LN(A)) + A`.
pub fn sca_stage(kv: &Rows, q: &Rows, grid: (usize, usize), stage: &ScaStage, store: &ParamStore) -> (Rows, Rows) {
    let qn = layer_norm(q, &stage.norm_q, store);
    let kvn = match &stage.norm_kv {
        Some(n) => layer_norm(kv, n, store),
        None => qn.clone(),
    };
    let a = add_rows(&mha(&kvn, &qn, &stage.attn, store), q);
    let f = mix_ffn(&layer_norm(&a, &stage.norm_ffn, store), grid, &stage.ffn, store);
    let s = add_rows(&f, &a);
    (a, s)
}

/// Bilinear sample of a single `h x w` plane with half-pixel centres.
pub fn bilinear(img: &[Vec<f64>], out_h: usize, out_w: usize) -> Vec<Vec<f64>> {
    let (h, w) = (img.len(), img[0].len());
    let src = |d: usize, in_len: usize, out_len: usize| {
        let s = ((d as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        (i0, i1, s - i0 as f64)
    };
    (0..out_h)
        .map(|y| {
            let (y0, y1, fy) = src(y, h, out_h);
            (0..out_w)
                .map(|x| {
                    let (x0, x1, fx) = src(x, w, out_w);
                    let top = img[y0][x0] * (1.0 - fx) + img[y0][x1] * fx;
                    let bot = img[y1][x0] * (1.0 - fx) + img[y1][x1] * fx;
                    top * (1.0 - fy) + bot * fy
                })
                .collect()
        })
        .collect()
}

pub fn rand_tensor(shape: &[usize], seed: u64, label: &str) -> Tensor {
    use rand::Rng;
    let mut rng = scaseg_core::rng::SeedSource::new(seed).stream(label);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Overwrites every trainable tensor with uniform values in `[-scale, scale]`.
pub fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        let t = rand_tensor(store.get(id).shape(), seed, store.name(id)).map(|v| v * scale);
        store.set(id, t).unwrap();
    }
}
