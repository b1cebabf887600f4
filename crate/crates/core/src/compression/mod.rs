//! Post-hoc token reduction on dense spatio-temporal feature maps.
//!
//! A [`FeatureMap`] holds `T×H×W` patch tokens of width `C` plus one class
//! token per frame. A [`BlockPartition`] groups the patch grid into
//! non-overlapping `(T/t)×(H/h)×(W/w)` blocks; every primitive here maps
//! each block (or, for [`tome_merge`], the token set) to fewer tokens.

mod partition;
mod tile;
mod tome;

use std::fmt;
use std::str::FromStr;

pub use partition::{partition_blocks, BlockPartition};
pub use tile::{tile_frames, untile_frames};
pub use tome::tome_merge;

use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor};

/// Patch tokens `[T, H, W, C]` and per-frame class tokens `[T, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<E: Element = f32> {
    tokens: Tensor<E>,
    cls: Tensor<E>,
}

impl<E: Element> FeatureMap<E> {
    pub fn new(tokens: Tensor<E>, cls: Tensor<E>) -> Result<Self> {
        let s = tokens.shape();
        if s.len() != 4 {
            return Err(Error::Dimension(format!(
                "feature tokens must be T×H×W×C, got {s:?}"
            )));
        }
        if cls.shape() != [s[0], s[3]] {
            return Err(Error::Dimension(format!(
                "class tokens {:?} do not match tokens {s:?}",
                cls.shape()
            )));
        }
        Ok(Self { tokens, cls })
    }

    pub fn tokens(&self) -> &Tensor<E> {
        &self.tokens
    }

    pub fn cls(&self) -> &Tensor<E> {
        &self.cls
    }

    /// `(T, H, W, C)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.tokens.shape();
        (s[0], s[1], s[2], s[3])
    }

    /// Patch tokens flattened to `[T·H·W, C]` in `(τ, i, j)` order.
    pub fn flat_tokens(&self) -> Tensor<E> {
        let (t, h, w, c) = self.dims();
        self.tokens
            .reshape(&[t * h * w, c])
            .expect("same element count")
    }

    pub fn into_parts(self) -> (Tensor<E>, Tensor<E>) {
        (self.tokens, self.cls)
    }

    fn check_partition(&self, part: &BlockPartition) -> Result<()> {
        let (t, h, w, _) = self.dims();
        if part.source() != [t, h, w] {
            return Err(Error::Dimension(format!(
                "feature map grid {:?} does not match partition source {:?}",
                [t, h, w],
                part.source()
            )));
        }
        Ok(())
    }
}

/// Which primitive produced a [`CompressedMap`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Wap,
    Avg,
    Max,
    Sub,
    Tome,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Wap => "wap",
            Method::Avg => "avg",
            Method::Max => "max",
            Method::Sub => "sub",
            Method::Tome => "tome",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wap" => Ok(Method::Wap),
            "avg" => Ok(Method::Avg),
            "max" => Ok(Method::Max),
            "sub" => Ok(Method::Sub),
            "tome" => Ok(Method::Tome),
            other => Err(Error::Config(format!(
                "unknown compression method {other:?} (expected wap|avg|max|sub|tome)"
            ))),
        }
    }
}

/// Pooling baselines of [`pool_compress`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Average,
    Max,
    /// Keeps the token at the lexicographically first `(τ, i, j)` of each block.
    Subsample,
}

impl PoolMode {
    fn method(self) -> Method {
        match self {
            PoolMode::Average => Method::Avg,
            PoolMode::Max => Method::Max,
            PoolMode::Subsample => Method::Sub,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub method: Method,
    /// `[T, H, W, C]`.
    pub source: [usize; 4],
    /// `[t, h, w]`.
    pub target: [usize; 3],
    pub ratio: usize,
}

impl fmt::Display for Provenance {
    /// The one-line sidecar format:
    /// `method=wap source=4x8x8x16 target=1x4x4 r=16`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [tt, hh, ww, cc] = self.source;
        let [t, h, w] = self.target;
        write!(
            f,
            "method={} source={tt}x{hh}x{ww}x{cc} target={t}x{h}x{w} r={}",
            self.method, self.ratio
        )
    }
}

/// Compressed tokens `[t, h, w, C]` with their provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedMap<E: Element = f32> {
    pub tokens: Tensor<E>,
    pub provenance: Provenance,
}

impl<E: Element> CompressedMap<E> {
    /// Tokens flattened to `[t·h·w, C]` in `(u, v, s)` order.
    pub fn flat_tokens(&self) -> Tensor<E> {
        let s = self.tokens.shape();
        self.tokens
            .reshape(&[s[0] * s[1] * s[2], s[3]])
            .expect("same element count")
    }
}

fn provenance<E: Element>(fm: &FeatureMap<E>, part: &BlockPartition, method: Method) -> Provenance {
    let (t, h, w, c) = fm.dims();
    Provenance {
        method,
        source: [t, h, w, c],
        target: part.target(),
        ratio: part.ratio(),
    }
}

/// Softmax weights of every block, each in [`BlockPartition::members`] order.
///
/// The logit of token `x[τ,i,j]` is `cls[τ]·x[τ,i,j] / √C`, using the class
/// token of the token's own frame; the softmax runs over one block.
pub fn wap_weights<E: Element>(fm: &FeatureMap<E>, part: &BlockPartition) -> Result<Vec<Vec<f64>>> {
    fm.check_partition(part)?;
    let (_, h, w, c) = fm.dims();
    let x = fm.tokens.data();
    let cls = fm.cls.data();
    let scale = 1.0 / (c as f64).sqrt();
    let mut out = Vec::with_capacity(part.num_blocks());
    for block in part.blocks() {
        let mut logits: Vec<f64> = part
            .members(block)
            .map(|(tau, i, j)| {
                let tok = &x[((tau * h + i) * w + j) * c..][..c];
                let q = &cls[tau * c..(tau + 1) * c];
                tok.iter()
                    .zip(q)
                    .map(|(a, b)| a.as_f64() * b.as_f64())
                    .sum::<f64>()
                    * scale
            })
            .collect();
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Numeric("non-finite WAP logit".into()));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            denom += *l;
        }
        logits.iter_mut().for_each(|l| *l /= denom);
        out.push(logits);
    }
    Ok(out)
}

/// Weighted average pooling: each block becomes the softmax-weighted
/// combination of its tokens, weighted by affinity with the frame's class
/// token. Class tokens are queries only and never appear in the output.
pub fn wap_compress<E: Element>(fm: &FeatureMap<E>, part: &BlockPartition) -> Result<CompressedMap<E>> {
    let weights = wap_weights(fm, part)?;
    let (_, h, w, c) = fm.dims();
    let x = fm.tokens.data();
    let mut out = Vec::with_capacity(part.num_blocks() * c);
    let mut acc = vec![0.0f64; c];
    for (block, wts) in part.blocks().zip(&weights) {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for ((tau, i, j), &wt) in part.members(block).zip(wts) {
            let tok = &x[((tau * h + i) * w + j) * c..][..c];
            for (a, v) in acc.iter_mut().zip(tok) {
                *a += wt * v.as_f64();
            }
        }
        out.extend(acc.iter().map(|&a| E::of(a)));
    }
    let [t, hh, ww] = part.target();
    Ok(CompressedMap {
        tokens: Tensor::new(&[t, hh, ww, c], out)?,
        provenance: provenance(fm, part, Method::Wap),
    })
}

pub fn pool_compress<E: Element>(
    fm: &FeatureMap<E>,
    part: &BlockPartition,
    mode: PoolMode,
) -> Result<CompressedMap<E>> {
    fm.check_partition(part)?;
    let (_, h, w, c) = fm.dims();
    let x = fm.tokens.data();
    let vol = part.ratio() as f64;
    let mut out = Vec::with_capacity(part.num_blocks() * c);
    for block in part.blocks() {
        let mut members = part.members(block);
        match mode {
            PoolMode::Subsample => {
                let (tau, i, j) = members.next().expect("blocks are non-empty");
                out.extend_from_slice(&x[((tau * h + i) * w + j) * c..][..c]);
            }
            PoolMode::Average => {
                let mut acc = vec![0.0f64; c];
                for (tau, i, j) in members {
                    let tok = &x[((tau * h + i) * w + j) * c..][..c];
                    acc.iter_mut().zip(tok).for_each(|(a, v)| *a += v.as_f64());
                }
                out.extend(acc.iter().map(|&a| E::of(a / vol)));
            }
            PoolMode::Max => {
                let mut acc = vec![E::neg_infinity(); c];
                for (tau, i, j) in members {
                    let tok = &x[((tau * h + i) * w + j) * c..][..c];
                    acc.iter_mut().zip(tok).for_each(|(a, &v)| *a = a.max(v));
                }
                out.extend(acc);
            }
        }
    }
    let [t, hh, ww] = part.target();
    Ok(CompressedMap {
        tokens: Tensor::new(&[t, hh, ww, c], out)?,
        provenance: provenance(fm, part, mode.method()),
    })
}

/// Runs any [`Method`] with the partition's token budget. Token merging
/// reduces the flattened token set to `N/r` and lays the result out on the
/// target grid in surviving-token order.
pub fn compress<E: Element>(
    fm: &FeatureMap<E>,
    part: &BlockPartition,
    method: Method,
) -> Result<CompressedMap<E>> {
    match method {
        Method::Wap => wap_compress(fm, part),
        Method::Avg => pool_compress(fm, part, PoolMode::Average),
        Method::Max => pool_compress(fm, part, PoolMode::Max),
        Method::Sub => pool_compress(fm, part, PoolMode::Subsample),
        Method::Tome => {
            fm.check_partition(part)?;
            let merged = tome_merge(&fm.flat_tokens(), part.num_blocks())?;
            let [t, h, w] = part.target();
            let c = fm.dims().3;
            Ok(CompressedMap {
                tokens: merged.reshape(&[t, h, w, c])?,
                provenance: provenance(fm, part, Method::Tome),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn random_map(dims: [usize; 4], seed: u64) -> FeatureMap<f64> {
        let mut r = SplitMix64::new(seed);
        let [t, h, w, c] = dims;
        FeatureMap::new(
            Tensor::from_fn(&[t, h, w, c], |_| r.normal()),
            Tensor::from_fn(&[t, c], |_| r.normal()),
        )
        .unwrap()
    }

    /// Straightforward evaluation of the pooling formula, one output token
    /// at a time, independent of the block iterators.
    fn wap_oracle(fm: &FeatureMap<f64>, target: [usize; 3]) -> Vec<f64> {
        let (tt, hh, ww, c) = fm.dims();
        let [t, h, w] = target;
        let (bt, bh, bw) = (tt / t, hh / h, ww / w);
        let mut out = vec![];
        for u in 0..t {
            for v in 0..h {
                for s in 0..w {
                    let mut logits = vec![];
                    let mut toks = vec![];
                    for tau in u * bt..(u + 1) * bt {
                        for i in v * bh..(v + 1) * bh {
                            for j in s * bw..(s + 1) * bw {
                                let x: Vec<f64> = (0..c).map(|k| fm.tokens().at(&[tau, i, j, k])).collect();
                                let q: Vec<f64> = (0..c).map(|k| fm.cls().at(&[tau, k])).collect();
                                let dot: f64 = x.iter().zip(&q).map(|(a, b)| a * b).sum();
                                logits.push(dot / (c as f64).sqrt());
                                toks.push(x);
                            }
                        }
                    }
                    let z: f64 = logits.iter().map(|l| l.exp()).sum();
                    for k in 0..c {
                        out.push(
                            logits
                                .iter()
                                .zip(&toks)
                                .map(|(l, x)| l.exp() / z * x[k])
                                .sum(),
                        );
                    }
                }
            }
        }
        out
    }

    #[test]
    fn wap_matches_direct_formula() {
        let fm = random_map([4, 8, 8, 16], 77);
        let part = partition_blocks([4, 8, 8], [1, 4, 4]).unwrap();
        let got = wap_compress(&fm, &part).unwrap();
        assert_eq!(got.tokens.shape(), &[1, 4, 4, 16]);
        let want = wap_oracle(&fm, [1, 4, 4]);
        for (a, b) in got.tokens.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(got.provenance.to_string(), "method=wap source=4x8x8x16 target=1x4x4 r=16");
    }

    #[test]
    fn wap_singleton_blocks_are_identity() {
        let fm = random_map([2, 3, 3, 5], 1);
        let part = partition_blocks([2, 3, 3], [2, 3, 3]).unwrap();
        let got = wap_compress(&fm, &part).unwrap();
        assert_eq!(got.tokens.data(), fm.tokens().data());
    }

    #[test]
    fn wap_of_equal_tokens_is_that_token() {
        let tok = [0.5, -1.0, 2.0];
        let fm = FeatureMap::new(
            Tensor::<f64>::from_fn(&[2, 2, 2, 3], |i| tok[i % 3]),
            Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, -4.0, 0.0, 1.0]).unwrap(),
        )
        .unwrap();
        let part = partition_blocks([2, 2, 2], [1, 1, 1]).unwrap();
        let got = wap_compress(&fm, &part).unwrap();
        for (a, b) in got.tokens.data().iter().zip(tok) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wap_with_orthogonal_cls_is_average_pooling() {
        // Tokens live in channels 0..2, class tokens in channels 2..4.
        let mut r = SplitMix64::new(5);
        let tokens = Tensor::from_fn(&[2, 4, 4, 4], |i| if i % 4 < 2 { r.normal() } else { 0.0 });
        let cls = Tensor::from_fn(&[2, 4], |i| if i % 4 >= 2 { r.normal() * 5.0 } else { 0.0 });
        let fm = FeatureMap::new(tokens, cls).unwrap();
        let part = partition_blocks([2, 4, 4], [1, 2, 2]).unwrap();
        let a = wap_compress(&fm, &part).unwrap();
        let b = pool_compress(&fm, &part, PoolMode::Average).unwrap();
        assert!(a.tokens.max_abs_diff(&b.tokens).unwrap() < 1e-6);
    }

    #[test]
    fn pooling_examples() {
        let fm = FeatureMap::new(
            Tensor::<f64>::from_f64(&[1, 1, 2, 1], &[1.0, 3.0]).unwrap(),
            Tensor::from_f64(&[1, 1], &[0.0]).unwrap(),
        )
        .unwrap();
        let part = partition_blocks([1, 1, 2], [1, 1, 1]).unwrap();
        let avg = pool_compress(&fm, &part, PoolMode::Average).unwrap();
        let max = pool_compress(&fm, &part, PoolMode::Max).unwrap();
        let sub = pool_compress(&fm, &part, PoolMode::Subsample).unwrap();
        assert_eq!(avg.tokens.data(), &[2.0]);
        assert_eq!(max.tokens.data(), &[3.0]);
        assert_eq!(sub.tokens.data(), &[1.0]);

        let fm = random_map([2, 2, 2, 3], 9);
        let id = partition_blocks([2, 2, 2], [2, 2, 2]).unwrap();
        let sub = pool_compress(&fm, &id, PoolMode::Subsample).unwrap();
        assert_eq!(sub.tokens.data(), fm.tokens().data());
    }

    #[test]
    fn subsample_keeps_lexicographically_first_token() {
        let fm = random_map([4, 4, 4, 2], 3);
        let part = partition_blocks([4, 4, 4], [2, 2, 2]).unwrap();
        let sub = pool_compress(&fm, &part, PoolMode::Subsample).unwrap();
        for u in 0..2 {
            for v in 0..2 {
                for s in 0..2 {
                    for k in 0..2 {
                        assert_eq!(
                            sub.tokens.at(&[u, v, s, k]),
                            fm.tokens().at(&[2 * u, 2 * v, 2 * s, k])
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let fm = random_map([2, 4, 4, 3], 1);
        let part = partition_blocks([4, 4, 4], [2, 2, 2]).unwrap();
        assert!(matches!(wap_compress(&fm, &part), Err(Error::Dimension(_))));
        assert!(matches!(
            pool_compress(&fm, &part, PoolMode::Max),
            Err(Error::Dimension(_))
        ));
        assert!(FeatureMap::new(Tensor::<f32>::zeros(&[2, 2, 2, 3]), Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn token_count_law_holds_for_every_method() {
        let fm = random_map([4, 4, 4, 3], 12);
        let part = partition_blocks([4, 4, 4], [2, 2, 1]).unwrap();
        for m in [Method::Wap, Method::Avg, Method::Max, Method::Sub, Method::Tome] {
            let out = compress(&fm, &part, m).unwrap();
            assert_eq!(out.tokens.numel() / 3, 64 / part.ratio(), "{m}");
            assert_eq!(out.provenance.method, m);
        }
    }

    fn permute_channels(fm: &FeatureMap<f64>, perm: &[usize]) -> FeatureMap<f64> {
        let c = perm.len();
        let p = |t: &Tensor<f64>| {
            Tensor::from_fn(t.shape(), |i| t.data()[i - i % c + perm[i % c]])
        };
        FeatureMap::new(p(fm.tokens()), p(fm.cls())).unwrap()
    }

    proptest! {
        #[test]
        fn wap_weights_are_convex(seed in any::<u64>(), t in 1usize..3, h in 1usize..3, w in 1usize..3) {
            let fm = random_map([2 * t, 2 * h, 2 * w, 4], seed);
            let part = partition_blocks([2 * t, 2 * h, 2 * w], [t, h, w]).unwrap();
            for wts in wap_weights(&fm, &part).unwrap() {
                prop_assert!(wts.iter().all(|&x| x >= 0.0));
                prop_assert!((wts.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn primitives_commute_with_channel_permutations(seed in any::<u64>()) {
            let fm = random_map([2, 4, 4, 5], seed);
            let mut r = SplitMix64::new(seed ^ 0xabc);
            let mut perm: Vec<usize> = (0..5).collect();
            for i in (1..5).rev() {
                perm.swap(i, r.below(i as u64 + 1) as usize);
            }
            let pfm = permute_channels(&fm, &perm);
            let part = partition_blocks([2, 4, 4], [1, 2, 2]).unwrap();
            for m in [Method::Wap, Method::Avg, Method::Max, Method::Sub, Method::Tome] {
                let a = compress(&fm, &part, m).unwrap().tokens;
                let b = compress(&pfm, &part, m).unwrap().tokens;
                for (i, &bv) in b.data().iter().enumerate() {
                    let av = a.data()[i - i % 5 + perm[i % 5]];
                    prop_assert!((av - bv).abs() < 1e-9, "{}", m);
                }
            }
        }
    }
}
