//! Reference implementations written as plain nested loops.
//!
//! These share no code with the tape operators; they exist so that tests and
//! the `verify` command can compare the fast paths against the textbook
//! definitions.

use crate::tensor::{conv_out_extent, Tensor};

/// Direct cross-correlation, one output value at a time.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, padding: usize) -> Tensor {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kcin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin, kcin);
    let ho = conv_out_extent(h, kh, stride, padding).expect("kernel fits");
    let wo = conv_out_extent(wd, kw, stride, padding).expect("kernel fits");
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i) as isize - padding as isize;
                                let ix = (ox * stride + j) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at(&[co, ci, i, j]) * x.at(&[bi, ci, iy as usize, ix as usize]);
                            }
                        }
                    }
                    out.data_mut()[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

/// Expands a `[C, 1, kh, kw]` depthwise kernel to the equivalent block-diagonal
/// dense kernel `[C, C, kh, kw]`.
pub fn depthwise_as_dense(w: &Tensor) -> Tensor {
    let (c, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let mut dense = Tensor::zeros([c, c, kh, kw]);
    for ch in 0..c {
        for t in 0..kh * kw {
            dense.data_mut()[(ch * c + ch) * kh * kw + t] = w.data()[ch * kh * kw + t];
        }
    }
    dense
}

/// `x[rows, cin] @ w[cin, cout] + b`, rows taken over all leading axes.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    let rows = x.numel() / cin;
    let mut out = vec![0.0; rows * cout];
    for r in 0..rows {
        for o in 0..cout {
            let mut acc = b.map_or(0.0, |b| b.data()[o]);
            for i in 0..cin {
                acc += x.data()[r * cin + i] * w.data()[i * cout + o];
            }
            out[r * cout + o] = acc;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Tensor::new(shape, out).unwrap()
}

/// Explicit per-head attention. Returns the output `[N, L, C]` and the
/// attention matrices `[N, heads, L, L]`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> (Tensor, Tensor) {
    let (n, l, c) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let d = c / heads;
    let scale = (d as f64).sqrt();
    let mut out = Tensor::zeros([n, l, c]);
    let mut probs = Tensor::zeros([n, heads, l, l]);
    for b in 0..n {
        for h in 0..heads {
            for i in 0..l {
                let logits: Vec<f64> = (0..l)
                    .map(|j| (0..d).map(|t| q.at(&[b, i, h * d + t]) * k.at(&[b, j, h * d + t])).sum::<f64>() / scale)
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                for j in 0..l {
                    probs.data_mut()[((b * heads + h) * l + i) * l + j] = exps[j] / total;
                }
                for t in 0..d {
                    let acc: f64 = (0..l).map(|j| exps[j] / total * v.at(&[b, j, h * d + t])).sum();
                    out.data_mut()[(b * l + i) * c + h * d + t] = acc;
                }
            }
        }
    }
    (out, probs)
}

/// Softmax over two logits, written out for the two-branch case.
pub fn two_way_softmax(a: f64, b: f64) -> (f64, f64) {
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    (ea / (ea + eb), eb / (ea + eb))
}

/// Channel-wise blend `w_local * local + w_global * global` with `[N, C]` weights.
pub fn blend(local: &Tensor, global: &Tensor, w_local: &[f64], w_global: &[f64]) -> Tensor {
    let (n, c) = (local.shape()[0], local.shape()[1]);
    let s = local.numel() / (n * c);
    let mut out = local.clone();
    for nc in 0..n * c {
        for k in 0..s {
            let i = nc * s + k;
            out.data_mut()[i] = w_local[nc] * local.data()[i] + w_global[nc] * global.data()[i];
        }
    }
    out
}

/// Train-mode batch norm over axis 1 with the biased batch variance.
pub fn batch_norm(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let s = x.numel() / (n * c);
    let mut out = x.clone();
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| (0..s).map(move |k| (b * c + ch) * s + k))
            .map(|i| x.data()[i])
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        for b in 0..n {
            for k in 0..s {
                let i = (b * c + ch) * s + k;
                out.data_mut()[i] = gamma[ch] * (x.data()[i] - mean) / (var + eps).sqrt() + beta[ch];
            }
        }
    }
    out
}

/// Parameters of the two-branch fusion gate.
pub struct FusionParams<'a> {
    /// `[C, hidden]`
    pub compact: &'a Tensor,
    pub bn_gamma: &'a [f64],
    pub bn_beta: &'a [f64],
    /// `[hidden, C]` each
    pub fc_local: &'a Tensor,
    pub fc_local_bias: &'a Tensor,
    pub fc_global: &'a Tensor,
    pub fc_global_bias: &'a Tensor,
}

/// Fused map and per-channel `(w_local, w_global)` gates, `[N * C]` each.
pub fn adaptive_fusion(local: &Tensor, global: &Tensor, p: &FusionParams<'_>, eps: f64) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (n, c) = (local.shape()[0], local.shape()[1]);
    let s = local.numel() / (n * c);
    let mut pooled = Tensor::zeros([n, c]);
    for nc in 0..n * c {
        let sum: f64 = (0..s).map(|k| local.data()[nc * s + k] + global.data()[nc * s + k]).sum();
        pooled.data_mut()[nc] = sum / s as f64;
    }
    let mut z = batch_norm(&linear(&pooled, p.compact, None), p.bn_gamma, p.bn_beta, eps);
    z.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    let a = linear(&z, p.fc_local, Some(p.fc_local_bias));
    let g = linear(&z, p.fc_global, Some(p.fc_global_bias));
    let (wl, wg): (Vec<f64>, Vec<f64>) = a.data().iter().zip(g.data()).map(|(&x, &y)| two_way_softmax(x, y)).unzip();
    (blend(local, global, &wl, &wg), wl, wg)
}
