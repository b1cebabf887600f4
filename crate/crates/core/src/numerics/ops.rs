//! Differentiable operations recorded on a [`Tape`].

use std::rc::Rc;

use super::tape::{Tape, Var};
use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Boundary handling of [`Tape::depthwise_conv`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    /// Stride 1, output length equals input length.
    Same,
    /// Stride > 1; the sequence length must be divisible by the stride.
    Strided(usize),
}

impl ConvMode {
    pub fn stride(self) -> usize {
        match self {
            ConvMode::Same => 1,
            ConvMode::Strided(s) => s,
        }
    }
}

fn same_shape<E: Element>(op: &str, a: &Var<E>, b: &Var<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `out[m,n] = a[m,k] · b[k,n]`.
pub(crate) fn mm<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    rows_times_b(&mut out, n, k, b, |i, p| a[i * k + p]);
    out
}

/// `out[i,:] += Σ_p coef(i,p) · b[p,:]` with `p` ascending for every
/// element. Four output rows share each load of `b[p,:]`; the per-element
/// summation order is the same as a plain row loop.
fn rows_times_b<E: Element>(out: &mut [E], n: usize, k: usize, b: &[E], coef: impl Fn(usize, usize) -> E) {
    let m = if n == 0 { 0 } else { out.len() / n };
    let mut blocks = out.chunks_exact_mut(4 * n);
    let mut i0 = 0;
    for block in &mut blocks {
        let (r0, rest) = block.split_at_mut(n);
        let (r1, rest) = rest.split_at_mut(n);
        let (r2, r3) = rest.split_at_mut(n);
        for p in 0..k {
            let (c0, c1, c2, c3) = (coef(i0, p), coef(i0 + 1, p), coef(i0 + 2, p), coef(i0 + 3, p));
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = brow[j];
                r0[j] += c0 * bv;
                r1[j] += c1 * bv;
                r2[j] += c2 * bv;
                r3[j] += c3 * bv;
            }
        }
        i0 += 4;
    }
    for (r, row) in blocks.into_remainder().chunks_exact_mut(n.max(1)).enumerate() {
        let i = i0 + r;
        debug_assert!(i < m);
        for p in 0..k {
            let c = coef(i, p);
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += c * bv;
            }
        }
    }
}

/// `out[m,n] = a[m,k] · b[n,k]ᵀ`.
pub(crate) fn mm_nt<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// Dot product with eight interleaved partial sums, which vectorizes.
/// The summation order is fixed, so results are reproducible.
fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    let mut acc = [E::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: E = ac
        .remainder()
        .iter()
        .zip(bc.remainder())
        .fold(E::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let pairs = [acc[0] + acc[4], acc[1] + acc[5], acc[2] + acc[6], acc[3] + acc[7]];
    (pairs[0] + pairs[2]) + (pairs[1] + pairs[3]) + tail
}

/// `out[m,n] = a[k,m]ᵀ · b[k,n]`.
pub(crate) fn mm_tn<E: Element>(a: &[E], b: &[E], k: usize, m: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    rows_times_b(&mut out, n, k, b, |i, p| a[p * m + i]);
    out
}

/// In-place softmax of one slice, max-subtracted, denominator in f64.
pub(crate) fn softmax_slice<E: Element>(row: &mut [E]) {
    let max = row.iter().fold(E::neg_infinity(), |m, &x| m.max(x));
    let mut denom = 0.0f64;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        denom += x.as_f64();
    }
    let inv = E::of(1.0 / denom);
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Index into `0..n` with reflection about the end samples
/// (`-1 → 1`, `n → n-2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<E: Element> Tape<E> {
    pub fn matmul(&self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = mm(a.data(), b.data(), m, k, n);
        let (ra, rb) = (a.rc(), b.rc());
        Ok(self.record(
            Tensor::from_parts(vec![m, n], out),
            &[a, b],
            move |g, needs| {
                let da = needs[0].then(|| mm_nt(g, rb.data(), m, n, k));
                let db = needs[1].then(|| mm_tn(ra.data(), g, m, k, n));
                vec![da, db]
            },
        ))
    }

    pub fn reshape(&self, x: &Var<E>, shape: &[usize]) -> Result<Var<E>> {
        let t = x.value().reshape(shape)?;
        Ok(self.record(t, &[x], |g, _| vec![Some(g.to_vec())]))
    }

    pub fn add(&self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        same_shape("add", a, b)?;
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        Ok(self.record(
            Tensor::from_parts(a.shape().to_vec(), out),
            &[a, b],
            |g, needs| {
                vec![
                    needs[0].then(|| g.to_vec()),
                    needs[1].then(|| g.to_vec()),
                ]
            },
        ))
    }

    pub fn sub(&self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        same_shape("sub", a, b)?;
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        Ok(self.record(
            Tensor::from_parts(a.shape().to_vec(), out),
            &[a, b],
            |g, needs| {
                vec![
                    needs[0].then(|| g.to_vec()),
                    needs[1].then(|| g.iter().map(|&x| -x).collect()),
                ]
            },
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        same_shape("mul", a, b)?;
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let (ra, rb) = (a.rc(), b.rc());
        Ok(self.record(
            Tensor::from_parts(a.shape().to_vec(), out),
            &[a, b],
            move |g, needs| {
                let da = needs[0].then(|| g.iter().zip(rb.data()).map(|(&g, &y)| g * y).collect());
                let db = needs[1].then(|| g.iter().zip(ra.data()).map(|(&g, &x)| g * x).collect());
                vec![da, db]
            },
        ))
    }

    pub fn scale(&self, x: &Var<E>, s: E) -> Var<E> {
        let out = x.data().iter().map(|&v| v * s).collect();
        self.record(
            Tensor::from_parts(x.shape().to_vec(), out),
            &[x],
            move |g, _| vec![Some(g.iter().map(|&v| v * s).collect())],
        )
    }

    /// `x + b` where `b`'s shape equals the trailing dimensions of `x`.
    pub fn add_broadcast(&self, x: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        let (sx, sb) = (x.shape(), b.shape());
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return Err(Error::Dimension(format!("broadcast {sb:?} onto {sx:?}")));
        }
        let inner = b.value().numel();
        let out = x
            .data()
            .chunks(inner)
            .flat_map(|row| row.iter().zip(b.data()).map(|(&v, &w)| v + w))
            .collect();
        Ok(self.record(
            Tensor::from_parts(sx.to_vec(), out),
            &[x, b],
            move |g, needs| {
                let db = needs[1].then(|| {
                    let mut acc = vec![E::zero(); inner];
                    for row in g.chunks(inner) {
                        acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    acc
                });
                vec![needs[0].then(|| g.to_vec()), db]
            },
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, x: &Var<E>) -> Var<E> {
        let c = E::of(GELU_C);
        let a = E::of(0.044715);
        let half = E::of(0.5);
        let three = E::of(3.0);
        let out = x
            .data()
            .iter()
            .map(|&v| half * v * (E::one() + (c * (v + a * v * v * v)).tanh()))
            .collect();
        let rx = x.rc();
        self.record(
            Tensor::from_parts(x.shape().to_vec(), out),
            &[x],
            move |g, _| {
                let dx = g
                    .iter()
                    .zip(rx.data())
                    .map(|(&g, &v)| {
                        let u = c * (v + a * v * v * v);
                        let t = u.tanh();
                        let du = c * (E::one() + three * a * v * v);
                        g * (half * (E::one() + t) + half * v * (E::one() - t * t) * du)
                    })
                    .collect();
                vec![Some(dx)]
            },
        )
    }

    pub fn softmax_last_axis(&self, x: &Var<E>) -> Result<Var<E>> {
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN in softmax input".into()));
        }
        let n = *x.shape().last().expect("rank >= 1");
        let mut out = x.data().to_vec();
        out.chunks_mut(n).for_each(softmax_slice);
        let y = Rc::new(out.clone());
        Ok(self.record(
            Tensor::from_parts(x.shape().to_vec(), out),
            &[x],
            move |g, _| {
                let mut dx = vec![E::zero(); g.len()];
                for ((dxr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(&a, &b)| (a * b).as_f64()).sum();
                    let dot = E::of(dot);
                    for ((d, &gv), &yv) in dxr.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Normalizes each last-axis slice to zero mean and unit variance
    /// (population variance, epsilon inside the root), then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&self, x: &Var<E>, gain: &Var<E>, bias: &Var<E>) -> Result<Var<E>> {
        let d = *x.shape().last().expect("rank >= 1");
        if d < 2 || gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm over {:?} with gain {:?}, bias {:?}",
                x.shape(),
                gain.shape(),
                bias.shape()
            )));
        }
        let rows = x.value().numel() / d;
        let mut xhat = vec![E::zero(); rows * d];
        let mut inv_std = vec![E::zero(); rows];
        for (r, (src, dst)) in x.data().chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
            let mean = src.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = src
                .iter()
                .map(|v| (v.as_f64() - mean).powi(2))
                .sum::<f64>()
                / d as f64;
            let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = E::of((v.as_f64() - mean) * istd);
            }
            inv_std[r] = E::of(istd);
        }
        let out = xhat
            .chunks(d)
            .flat_map(|row| {
                row.iter()
                    .zip(gain.data().iter().zip(bias.data()))
                    .map(|(&h, (&g, &b))| h * g + b)
            })
            .collect();
        let rg = gain.rc();
        Ok(self.record(
            Tensor::from_parts(x.shape().to_vec(), out),
            &[x, gain, bias],
            move |g, needs| {
                let mut dgain = vec![E::zero(); d];
                let mut dbias = vec![E::zero(); d];
                let mut dx = needs[0].then(|| vec![E::zero(); rows * d]);
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    for j in 0..d {
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let mut mean_dh = 0.0f64;
                        let mut mean_dh_h = 0.0f64;
                        for j in 0..d {
                            let dh = (gr[j] * rg.data()[j]).as_f64();
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j].as_f64();
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        let istd = inv_std[r].as_f64();
                        for j in 0..d {
                            let dh = (gr[j] * rg.data()[j]).as_f64();
                            dx[r * d + j] = E::of(
                                istd * (dh - mean_dh - hr[j].as_f64() * mean_dh_h),
                            );
                        }
                    }
                }
                vec![dx, needs[1].then_some(dgain), needs[2].then_some(dbias)]
            },
        ))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `[batch, seq, 3·dim]` with queries, keys and values packed
    /// along the last axis; each head uses a contiguous `dim/heads` slice of
    /// each. Sequences in the batch never interact. Returns `[batch, seq, dim]`.
    pub fn attention(&self, qkv: &Var<E>, heads: usize) -> Result<Var<E>> {
        let s = qkv.shape();
        if s.len() != 3 || s[2] % 3 != 0 || heads == 0 || (s[2] / 3) % heads != 0 {
            return Err(Error::Dimension(format!(
                "attention over {s:?} with {heads} heads"
            )));
        }
        let (batch, seq, dim) = (s[0], s[1], s[2] / 3);
        let hd = dim / heads;
        let scale = E::of(1.0 / (hd as f64).sqrt());
        let x = qkv.data();
        let mut out = vec![E::zero(); batch * seq * dim];
        let mut probs = vec![E::zero(); batch * heads * seq * seq];
        let (mut q, mut k, mut v) = (
            vec![E::zero(); seq * hd],
            vec![E::zero(); seq * hd],
            vec![E::zero(); seq * hd],
        );
        for b in 0..batch {
            for h in 0..heads {
                gather_head(x, b, h, seq, dim, hd, &mut q, &mut k, &mut v);
                let a = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                let scores = mm_nt(&q, &k, seq, hd, seq);
                for (dst, s) in a.iter_mut().zip(scores) {
                    *dst = s * scale;
                }
                a.chunks_mut(seq).for_each(softmax_slice);
                let o = mm(a, &v, seq, seq, hd);
                for t in 0..seq {
                    let dst = &mut out[(b * seq + t) * dim + h * hd..][..hd];
                    dst.copy_from_slice(&o[t * hd..(t + 1) * hd]);
                }
            }
        }
        let rq = qkv.rc();
        Ok(self.record(
            Tensor::from_parts(vec![batch, seq, dim], out),
            &[qkv],
            move |g, _| {
                let x = rq.data();
                let mut dx = vec![E::zero(); x.len()];
                let (mut q, mut k, mut v) = (
                    vec![E::zero(); seq * hd],
                    vec![E::zero(); seq * hd],
                    vec![E::zero(); seq * hd],
                );
                let mut go = vec![E::zero(); seq * hd];
                for b in 0..batch {
                    for h in 0..heads {
                        gather_head(x, b, h, seq, dim, hd, &mut q, &mut k, &mut v);
                        for t in 0..seq {
                            go[t * hd..(t + 1) * hd]
                                .copy_from_slice(&g[(b * seq + t) * dim + h * hd..][..hd]);
                        }
                        let a = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                        let dv = mm_tn(a, &go, seq, seq, hd);
                        let da = mm_nt(&go, &v, seq, hd, seq);
                        let mut ds = vec![E::zero(); seq * seq];
                        for r in 0..seq {
                            let ar = &a[r * seq..(r + 1) * seq];
                            let dar = &da[r * seq..(r + 1) * seq];
                            let dot: f64 =
                                ar.iter().zip(dar).map(|(&p, &d)| (p * d).as_f64()).sum();
                            let dot = E::of(dot);
                            for c in 0..seq {
                                ds[r * seq + c] = ar[c] * (dar[c] - dot) * scale;
                            }
                        }
                        let dq = mm(&ds, &k, seq, seq, hd);
                        let dk = mm_tn(&ds, &q, seq, seq, hd);
                        for t in 0..seq {
                            let base = (b * seq + t) * 3 * dim + h * hd;
                            for j in 0..hd {
                                dx[base + j] += dq[t * hd + j];
                                dx[base + dim + j] += dk[t * hd + j];
                                dx[base + 2 * dim + j] += dv[t * hd + j];
                            }
                        }
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Depthwise 1-D convolution along `axis` of `x`, whose last axis holds
    /// the channels. `kernel` is `[k, channels]` with `k` odd; output
    /// position `o` is centred on input position `o·stride`, and positions
    /// outside the sequence are reflected back into it.
    pub fn depthwise_conv(
        &self,
        x: &Var<E>,
        kernel: &Var<E>,
        axis: usize,
        mode: ConvMode,
    ) -> Result<Var<E>> {
        let shape = x.shape().to_vec();
        let rank = shape.len();
        let ks = kernel.shape();
        if rank < 2 || axis >= rank - 1 || ks.len() != 2 || ks[1] != shape[rank - 1] {
            return Err(Error::Dimension(format!(
                "depthwise conv of {shape:?} along axis {axis} with kernel {ks:?}"
            )));
        }
        let k = ks[0];
        if k % 2 == 0 {
            return Err(Error::Contract(format!("kernel length {k} is not odd")));
        }
        let stride = mode.stride();
        let n = shape[axis];
        if stride == 0 || (matches!(mode, ConvMode::Strided(_)) && (stride < 2 || n % stride != 0))
        {
            return Err(Error::Shape(format!(
                "sequence of {n} is not divisible by stride {stride}"
            )));
        }
        let channels = shape[rank - 1];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n_out = n / stride;
        let half = (k / 2) as isize;
        // Source index for every (output position, tap).
        let taps: Vec<usize> = (0..n_out)
            .flat_map(|o| {
                (0..k).map(move |j| reflect_index((o * stride) as isize + j as isize - half, n))
            })
            .collect();
        let taps = Rc::new(taps);
        let xd = x.data();
        let w = kernel.data();
        let mut out = vec![E::zero(); outer * n_out * inner];
        for a in 0..outer {
            for o in 0..n_out {
                let dst = &mut out[(a * n_out + o) * inner..][..inner];
                for j in 0..k {
                    let src = &xd[(a * n + taps[o * k + j]) * inner..][..inner];
                    let wrow = &w[j * channels..(j + 1) * channels];
                    for (q, (d, &s)) in dst.iter_mut().zip(src).enumerate() {
                        *d += wrow[q % channels] * s;
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = n_out;
        let (rx, rw) = (x.rc(), kernel.rc());
        Ok(self.record(
            Tensor::from_parts(out_shape, out),
            &[x, kernel],
            move |g, needs| {
                let xd = rx.data();
                let w = rw.data();
                let mut dx = needs[0].then(|| vec![E::zero(); outer * n * inner]);
                let mut dw = needs[1].then(|| vec![E::zero(); k * channels]);
                for a in 0..outer {
                    for o in 0..n_out {
                        let gr = &g[(a * n_out + o) * inner..][..inner];
                        for j in 0..k {
                            let base = (a * n + taps[o * k + j]) * inner;
                            if let Some(dx) = dx.as_mut() {
                                let wrow = &w[j * channels..(j + 1) * channels];
                                for (q, &gv) in gr.iter().enumerate() {
                                    dx[base + q] += wrow[q % channels] * gv;
                                }
                            }
                            if let Some(dw) = dw.as_mut() {
                                let src = &xd[base..base + inner];
                                let drow = &mut dw[j * channels..(j + 1) * channels];
                                for (q, (&gv, &s)) in gr.iter().zip(src).enumerate() {
                                    drow[q % channels] += gv * s;
                                }
                            }
                        }
                    }
                }
                vec![dx, dw]
            },
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&self, a: &Var<E>, b: &Var<E>, axis: usize) -> Result<Var<E>> {
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::Dimension(format!("concat {sa:?} with {sb:?} on {axis}")));
        }
        let outer: usize = sa[..axis].iter().product();
        let ia: usize = sa[axis..].iter().product();
        let ib: usize = sb[axis..].iter().product();
        let mut out = Vec::with_capacity(outer * (ia + ib));
        for o in 0..outer {
            out.extend_from_slice(&a.data()[o * ia..(o + 1) * ia]);
            out.extend_from_slice(&b.data()[o * ib..(o + 1) * ib]);
        }
        let mut shape = sa.clone();
        shape[axis] += sb[axis];
        Ok(self.record(
            Tensor::from_parts(shape, out),
            &[a, b],
            move |g, needs| {
                let mut da = Vec::with_capacity(outer * ia);
                let mut db = Vec::with_capacity(outer * ib);
                for row in g.chunks(ia + ib) {
                    da.extend_from_slice(&row[..ia]);
                    db.extend_from_slice(&row[ia..]);
                }
                vec![needs[0].then_some(da), needs[1].then_some(db)]
            },
        ))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&self, x: &Var<E>, axis: usize, start: usize, len: usize) -> Result<Var<E>> {
        let s = x.shape().to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::Dimension(format!(
                "narrow {s:?} axis {axis} at {start}+{len}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let full = s[axis] * inner;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x.data()[o * full + start * inner..][..len * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        Ok(self.record(Tensor::from_parts(shape, out), &[x], move |g, _| {
            let mut dx = vec![E::zero(); outer * full];
            for (o, row) in g.chunks(len * inner).enumerate() {
                dx[o * full + start * inner..][..len * inner].copy_from_slice(row);
            }
            vec![Some(dx)]
        }))
    }

    /// Rows of a `[rows, d]` tensor picked by `index` (repeats allowed).
    pub fn gather_rows(&self, x: &Var<E>, index: Rc<Vec<usize>>) -> Result<Var<E>> {
        let s = x.shape();
        if s.len() != 2 || index.iter().any(|&i| i >= s[0]) || index.is_empty() {
            return Err(Error::Dimension(format!("gather from {s:?}")));
        }
        let (rows, d) = (s[0], s[1]);
        let out = index
            .iter()
            .flat_map(|&i| x.data()[i * d..(i + 1) * d].iter().copied())
            .collect();
        let n = index.len();
        Ok(self.record(Tensor::from_parts(vec![n, d], out), &[x], move |g, _| {
            let mut dx = vec![E::zero(); rows * d];
            for (r, &i) in index.iter().enumerate() {
                dx[i * d..(i + 1) * d]
                    .iter_mut()
                    .zip(&g[r * d..(r + 1) * d])
                    .for_each(|(a, &b)| *a += b);
            }
            vec![Some(dx)]
        }))
    }

    pub fn sum_all(&self, x: &Var<E>) -> Var<E> {
        let s: f64 = x.data().iter().map(|v| v.as_f64()).sum();
        let n = x.value().numel();
        self.record(Tensor::scalar(E::of(s)), &[x], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self, x: &Var<E>) -> Var<E> {
        let n = x.value().numel();
        let s: f64 = x.data().iter().map(|v| v.as_f64()).sum();
        self.record(
            Tensor::scalar(E::of(s / n as f64)),
            &[x],
            move |g, _| vec![Some(vec![g[0] / E::of(n as f64); n])],
        )
    }

    /// Mean squared difference over all elements.
    pub fn mse(&self, a: &Var<E>, b: &Var<E>) -> Result<Var<E>> {
        let d = self.sub(a, b)?;
        let sq = self.mul(&d, &d)?;
        Ok(self.mean_all(&sq))
    }

    /// Mean squared residual after clamping residuals to `±sigma_mult·σ`,
    /// where σ is the population standard deviation of all residuals
    /// `pred − target`. σ is part of the differentiated function. When
    /// σ is zero no clamping happens.
    pub fn outlier_clipped_mse(
        &self,
        pred: &Var<E>,
        target: &Var<E>,
        sigma_mult: f64,
    ) -> Result<Var<E>> {
        same_shape("outlier_clipped_mse", pred, target)?;
        let diff: Vec<f64> = pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t).as_f64())
            .collect();
        let clip = clip_residuals(&diff, sigma_mult);
        let m = diff.len() as f64;
        let loss = clip.clamped.iter().map(|c| c * c).sum::<f64>() / m;
        Ok(self.record(
            Tensor::scalar(E::of(loss)),
            &[pred, target],
            move |g, needs| {
                let g0 = g[0].as_f64();
                let mut grad = vec![0.0f64; diff.len()];
                let n_clip = clip.mask.iter().filter(|&&c| c).count() as f64;
                for (i, gi) in grad.iter_mut().enumerate() {
                    if !clip.mask[i] {
                        *gi = 2.0 * clip.clamped[i] / m;
                    }
                }
                if n_clip > 0.0 && clip.sigma > 0.0 {
                    // dL/dbound · dbound/dσ · dσ/dd_j
                    let dl_dbound = 2.0 * clip.bound * n_clip / m;
                    for (gi, &d) in grad.iter_mut().zip(&diff) {
                        *gi += dl_dbound * sigma_mult * (d - clip.mean) / (m * clip.sigma);
                    }
                }
                let dp: Vec<E> = grad.iter().map(|&x| E::of(x * g0)).collect();
                let dt = needs[1].then(|| dp.iter().map(|&x| -x).collect());
                vec![needs[0].then_some(dp), dt]
            },
        ))
    }
}

/// Residual statistics used by outlier clipping.
#[derive(Clone, Debug)]
pub struct ClippedResiduals {
    pub mean: f64,
    pub sigma: f64,
    /// Clamp bound `sigma_mult·σ`; infinite when σ is zero.
    pub bound: f64,
    pub clamped: Vec<f64>,
    /// True where the residual was saturated at the bound.
    pub mask: Vec<bool>,
}

pub fn clip_residuals(diff: &[f64], sigma_mult: f64) -> ClippedResiduals {
    let m = diff.len() as f64;
    let mean = diff.iter().sum::<f64>() / m;
    let sigma = (diff.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / m).sqrt();
    let bound = if sigma > 0.0 {
        sigma_mult * sigma
    } else {
        f64::INFINITY
    };
    let mask: Vec<bool> = diff.iter().map(|d| d.abs() > bound).collect();
    let clamped = diff.iter().map(|&d| d.clamp(-bound, bound)).collect();
    ClippedResiduals {
        mean,
        sigma,
        bound,
        clamped,
        mask,
    }
}

#[allow(clippy::too_many_arguments)]
fn gather_head<E: Element>(
    x: &[E],
    b: usize,
    h: usize,
    seq: usize,
    dim: usize,
    hd: usize,
    q: &mut [E],
    k: &mut [E],
    v: &mut [E],
) {
    for t in 0..seq {
        let base = (b * seq + t) * 3 * dim + h * hd;
        q[t * hd..(t + 1) * hd].copy_from_slice(&x[base..base + hd]);
        k[t * hd..(t + 1) * hd].copy_from_slice(&x[base + dim..base + dim + hd]);
        v[t * hd..(t + 1) * hd].copy_from_slice(&x[base + 2 * dim..base + 2 * dim + hd]);
    }
}
