//! Scalar reference implementations shared by the integration tests.
#![allow(dead_code)]

use litetok::numerics::{Tensor, LAYER_NORM_EPS};

pub fn ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + LAYER_NORM_EPS).sqrt() * g[i] + b[i])
        .collect()
}

pub fn affine(x: &[f64], w: &Tensor<f64>, b: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    (0..cols)
        .map(|j| b[j] + (0..rows).map(|i| x[i] * w.at(&[i, j])).sum::<f64>())
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// One pre-norm transformer block over a token list, evaluated directly.
/// `g` resolves a block-local name such as `"qkv.w"`.
pub fn block_oracle<'a>(tokens: &[Vec<f64>], g: impl Fn(&str) -> &'a Tensor<f64>, heads: usize) -> Vec<Vec<f64>> {
    let c = tokens[0].len();
    let hd = c / heads;
    let qkv: Vec<Vec<f64>> = tokens
        .iter()
        .map(|x| affine(&ln(x, g("ln1.g").data(), g("ln1.b").data()), g("qkv.w"), g("qkv.b").data()))
        .collect();
    let mut attn = vec![vec![0.0; c]; tokens.len()];
    for h in 0..heads {
        for (i, out) in attn.iter_mut().enumerate() {
            let q = &qkv[i][h * hd..(h + 1) * hd];
            let scores: Vec<f64> = qkv
                .iter()
                .map(|r| q.iter().zip(&r[c + h * hd..c + (h + 1) * hd]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for (j, r) in qkv.iter().enumerate() {
                let w = scores[j].exp() / z;
                for k in 0..hd {
                    out[h * hd + k] += w * r[2 * c + h * hd + k];
                }
            }
        }
    }
    tokens
        .iter()
        .zip(&attn)
        .map(|(x, a)| {
            let o = affine(a, g("out.w"), g("out.b").data());
            let x1: Vec<f64> = x.iter().zip(&o).map(|(u, v)| u + v).collect();
            let m = affine(&ln(&x1, g("ln2.g").data(), g("ln2.b").data()), g("fc1.w"), g("fc1.b").data());
            let m: Vec<f64> = m.into_iter().map(gelu).collect();
            let m = affine(&m, g("fc2.w"), g("fc2.b").data());
            x1.iter().zip(&m).map(|(u, v)| u + v).collect()
        })
        .collect()
}

/// Weighted average pooling written out per output block: each token of a
/// block is weighted by `softmax(cls[τ]·x / √C)` over the block.
/// `x` is `[T, H, W, C]`, `cls` is `[T, C]`, `target` is `[t, h, w]`;
/// returns `[t, h, w, C]` row-major.
pub fn wap_oracle(x: &Tensor<f64>, cls: &Tensor<f64>, target: [usize; 3]) -> Vec<f64> {
    let s = x.shape();
    let (tt, hh, ww, c) = (s[0], s[1], s[2], s[3]);
    let (bt, bh, bw) = (tt / target[0], hh / target[1], ww / target[2]);
    let mut out = Vec::new();
    for u in 0..target[0] {
        for v in 0..target[1] {
            for w in 0..target[2] {
                let mut members = Vec::new();
                for tau in u * bt..(u + 1) * bt {
                    for i in v * bh..(v + 1) * bh {
                        for j in w * bw..(w + 1) * bw {
                            let logit = (0..c).map(|k| cls.at(&[tau, k]) * x.at(&[tau, i, j, k])).sum::<f64>()
                                / (c as f64).sqrt();
                            members.push((logit, tau, i, j));
                        }
                    }
                }
                let max = members.iter().map(|m| m.0).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = members.iter().map(|m| (m.0 - max).exp()).sum();
                for k in 0..c {
                    out.push(
                        members
                            .iter()
                            .map(|&(l, tau, i, j)| (l - max).exp() / z * x.at(&[tau, i, j, k]))
                            .sum(),
                    );
                }
            }
        }
    }
    out
}
