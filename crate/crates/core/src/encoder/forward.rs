use std::collections::BTreeMap;

use super::params::down_name;
use super::{EncoderSpec, ModelParams, Role};
use crate::compression::FeatureMap;
use crate::error::{Error, Result};
use crate::numerics::{ConvMode, Element, Tape, Tensor, Var};

/// Parameters registered on a tape, by name.
pub struct ParamVars<E: Element = f32> {
    map: BTreeMap<String, Var<E>>,
}

impl<E: Element> ParamVars<E> {
    /// Trainable parameters are tracked leaves; frozen ones are constants.
    pub fn new(tape: &Tape<E>, params: &ModelParams<E>, trainable: bool) -> Self {
        Self::register(tape, params.iter(), trainable)
    }

    pub fn register<'t>(
        tape: &Tape<E>,
        tensors: impl IntoIterator<Item = (&'t String, &'t Tensor<E>)>,
        trainable: bool,
    ) -> Self {
        let map = tensors
            .into_iter()
            .map(|(k, t)| {
                let v = if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Self { map }
    }

    /// Wraps vars created elsewhere, e.g. by a gradient checker.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var<E>)>) -> Self {
        Self {
            map: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Var<E>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("parameter {name} missing for this spec")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<E>)> {
        self.map.iter()
    }
}

/// `x·W + b` over the last axis of `x`.
pub(crate) fn linear<E: Element>(
    tape: &Tape<E>,
    vars: &ParamVars<E>,
    x: &Var<E>,
    w: &str,
    b: Option<&str>,
) -> Result<Var<E>> {
    let s = x.shape().to_vec();
    let d = *s.last().expect("rank >= 1");
    let x2 = tape.reshape(x, &[s.iter().product::<usize>() / d, d])?;
    let mut y = tape.matmul(&x2, vars.get(w)?)?;
    if let Some(b) = b {
        y = tape.add_broadcast(&y, vars.get(b)?)?;
    }
    let mut out = s;
    *out.last_mut().expect("rank >= 1") = y.shape()[1];
    tape.reshape(&y, &out)
}

/// Pre-norm residual block on `seq = [batch, len, C]`: multi-head
/// self-attention within each batch row, then a GELU MLP. Parameter names
/// are `prefix` followed by `ln1.g`, `qkv.w`, `out.w`, `fc1.w`, ...
pub fn transformer_block<E: Element>(
    tape: &Tape<E>,
    vars: &ParamVars<E>,
    prefix: &str,
    heads: usize,
    seq: &Var<E>,
) -> Result<Var<E>> {
    let p = |n: &str| format!("{prefix}{n}");
    let y = tape.layer_norm(seq, vars.get(&p("ln1.g"))?, vars.get(&p("ln1.b"))?)?;
    let qkv = linear(tape, vars, &y, &p("qkv.w"), Some(&p("qkv.b")))?;
    let a = tape.attention(&qkv, heads)?;
    let a = linear(tape, vars, &a, &p("out.w"), Some(&p("out.b")))?;
    let seq = tape.add(seq, &a)?;
    let y = tape.layer_norm(&seq, vars.get(&p("ln2.g"))?, vars.get(&p("ln2.b"))?)?;
    let m = tape.gelu(&linear(tape, vars, &y, &p("fc1.w"), Some(&p("fc1.b")))?);
    let m = linear(tape, vars, &m, &p("fc2.w"), Some(&p("fc2.b")))?;
    tape.add(&seq, &m)
}

/// One forward pass recorded on `tape`.
pub struct Forward<'a, E: Element = f32> {
    pub tape: &'a Tape<E>,
    pub spec: &'a EncoderSpec,
    pub vars: &'a ParamVars<E>,
}

/// Patch tokens `[t, h, w, C]` and class tokens `[t, C]` on a tape.
pub struct Tokens<E: Element = f32> {
    pub patches: Var<E>,
    pub cls: Var<E>,
}

/// Student result on a tape: student-width tokens and the projected
/// `[(N/r), D]` distillation output.
pub struct StudentVars<E: Element = f32> {
    pub tokens: Tokens<E>,
    pub distill: Var<E>,
}

/// Flattens `[T, px, px, 3]` frames to `[T·H·W, patch²·3]` rows, one per
/// patch in `(τ, i, j)` order, each laid out as `(dy, dx, channel)`.
fn patchify<E: Element>(clip: &Tensor<E>, spec: &EncoderSpec) -> Result<Tensor<E>> {
    let s = clip.shape();
    let px = spec.input_px;
    if s.len() != 4 || s[1] != px || s[2] != px || s[3] != 3 {
        return Err(Error::Shape(format!(
            "clip {s:?} does not match {px}x{px} RGB input"
        )));
    }
    let (t, p, g) = (s[0], spec.patch, spec.grid());
    let x = clip.data();
    let mut out = Vec::with_capacity(clip.numel());
    for f in 0..t {
        for i in 0..g {
            for j in 0..g {
                for dy in 0..p {
                    let start = ((f * px + i * p + dy) * px + j * p) * 3;
                    out.extend_from_slice(&x[start..start + p * 3]);
                }
            }
        }
    }
    Tensor::new(&[t * g * g, p * p * 3], out)
}

impl<'a, E: Element> Forward<'a, E> {
    fn v(&self, name: &str) -> Result<&Var<E>> {
        self.vars.get(name)
    }

    fn linear(&self, x: &Var<E>, w: &str, b: Option<&str>) -> Result<Var<E>> {
        linear(self.tape, self.vars, x, w, b)
    }

    pub fn embed(&self, clip: &Tensor<E>) -> Result<Tokens<E>> {
        let tape = self.tape;
        let rows = tape.constant(patchify(clip, self.spec)?);
        let (t, g, c) = (clip.shape()[0], self.spec.grid(), self.spec.dim);
        let x = self.linear(&rows, "patch.w", Some("patch.b"))?;
        let x = tape.reshape(&x, &[t, g * g, c])?;
        let x = tape.add_broadcast(&x, self.v("pos")?)?;
        let patches = tape.reshape(&x, &[t, g, g, c])?;
        let cls = tape.add_broadcast(&tape.constant(Tensor::zeros(&[t, c])), self.v("cls")?)?;
        Ok(Tokens { patches, cls })
    }

    /// Pre-norm attention and MLP over each time slice's class token and
    /// patch tokens. Slices never interact.
    pub fn spatial_block(&self, layer: usize, x: &Tokens<E>) -> Result<Tokens<E>> {
        let tape = self.tape;
        let s = x.patches.shape().to_vec();
        let (t, hw, c) = (s[0], s[1] * s[2], s[3]);
        let seq = tape.concat(
            &tape.reshape(&x.cls, &[t, 1, c])?,
            &tape.reshape(&x.patches, &[t, hw, c])?,
            1,
        )?;
        let seq = transformer_block(tape, self.vars, &format!("blocks.{layer}."), self.spec.heads, &seq)?;
        Ok(Tokens {
            cls: tape.reshape(&tape.narrow(&seq, 1, 0, 1)?, &[t, c])?,
            patches: tape.reshape(&tape.narrow(&seq, 1, 1, hw)?, &s)?,
        })
    }

    /// Depthwise convolution along time at every spatial position and on
    /// the class tokens; skipped when one time slice remains.
    pub fn temporal(&self, layer: usize, x: Tokens<E>) -> Result<Tokens<E>> {
        if !self.spec.temporal_layers || x.patches.shape()[0] == 1 {
            return Ok(x);
        }
        let k = self.v(&format!("temporal.{layer}.w"))?;
        Ok(Tokens {
            patches: self.tape.depthwise_conv(&x.patches, k, 0, ConvMode::Same)?,
            cls: self.tape.depthwise_conv(&x.cls, k, 0, ConvMode::Same)?,
        })
    }

    /// Strided depthwise convolutions of stride entry `entry`, one axis at a
    /// time. Class tokens follow the time axis only.
    pub fn downsample(&self, entry: usize, mut x: Tokens<E>) -> Result<Tokens<E>> {
        for (axis, s) in self.spec.strided_axes(entry) {
            let k = self.v(&down_name(entry, axis))?;
            x.patches = self
                .tape
                .depthwise_conv(&x.patches, k, axis, ConvMode::Strided(s))?;
            if axis == 0 {
                x.cls = self.tape.depthwise_conv(&x.cls, k, 0, ConvMode::Strided(s))?;
            }
        }
        Ok(x)
    }

    pub fn final_norm(&self, x: Tokens<E>) -> Result<Tokens<E>> {
        let (g, b) = (self.v("norm.g")?, self.v("norm.b")?);
        Ok(Tokens {
            patches: self.tape.layer_norm(&x.patches, g, b)?,
            cls: self.tape.layer_norm(&x.cls, g, b)?,
        })
    }

    pub fn teacher(&self, clip: &Tensor<E>) -> Result<Tokens<E>> {
        if self.spec.role != Role::Teacher {
            return Err(Error::Config("teacher forward with a student spec".into()));
        }
        let mut x = self.embed(clip)?;
        for l in 0..self.spec.num_layers {
            x = self.spatial_block(l, &x)?;
        }
        self.final_norm(x)
    }

    pub fn student(&self, clip: &Tensor<E>) -> Result<StudentVars<E>> {
        if self.spec.role != Role::Student {
            return Err(Error::Config("student forward with a teacher spec".into()));
        }
        if clip.rank() != 4 {
            return Err(Error::Shape(format!("clip {:?} is not T×H×W×3", clip.shape())));
        }
        let [t, h, w] = self.spec.output_grid(clip.shape()[0])?;
        let mut x = self.embed(clip)?;
        for l in 0..self.spec.num_layers {
            x = self.spatial_block(l, &x)?;
            x = self.temporal(l, x)?;
            if let Some(i) = self
                .spec
                .stride_schedule
                .iter()
                .position(|e| e.after_layer == l + 1)
            {
                x = self.downsample(i, x)?;
            }
        }
        let x = self.final_norm(x)?;
        let flat = self.tape.reshape(&x.patches, &[t * h * w, self.spec.dim])?;
        let distill = self.tape.matmul(&flat, self.v("proj.w")?)?;
        Ok(StudentVars { tokens: x, distill })
    }
}

/// Student result detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentOutput<E: Element = f32> {
    /// Compressed tokens `[t, h, w, C_student]` with class tokens `[t, C]`.
    pub features: FeatureMap<E>,
    /// `[(N/r), D]` in teacher width.
    pub distill: Tensor<E>,
}

fn detach<E: Element>(x: Tokens<E>) -> Result<FeatureMap<E>> {
    FeatureMap::new(x.patches.value().clone(), x.cls.value().clone())
}

fn frozen<E: Element, T>(
    params: &ModelParams<E>,
    f: impl FnOnce(&Forward<'_, E>) -> Result<T>,
) -> Result<T> {
    let tape = Tape::new();
    let vars = ParamVars::new(&tape, params, false);
    f(&Forward {
        tape: &tape,
        spec: &params.spec,
        vars: &vars,
    })
}

/// Linear patch projection plus the spatial positional embedding; class
/// tokens start as the learned class embedding in every frame.
pub fn patch_embed<E: Element>(clip: &Tensor<E>, params: &ModelParams<E>) -> Result<FeatureMap<E>> {
    frozen(params, |f| detach(f.embed(clip)?))
}

pub fn spatial_attention_block<E: Element>(
    fm: &FeatureMap<E>,
    params: &ModelParams<E>,
    layer: usize,
) -> Result<FeatureMap<E>> {
    frozen(params, |f| {
        let x = Tokens {
            patches: f.tape.constant(fm.tokens().clone()),
            cls: f.tape.constant(fm.cls().clone()),
        };
        detach(f.spatial_block(layer, &x)?)
    })
}

/// Dense frame-wise features: `N = T·H·W` tokens plus a class token per frame.
pub fn teacher_forward<E: Element>(clip: &Tensor<E>, params: &ModelParams<E>) -> Result<FeatureMap<E>> {
    frozen(params, |f| detach(f.teacher(clip)?))
}

pub fn student_forward<E: Element>(clip: &Tensor<E>, params: &ModelParams<E>) -> Result<StudentOutput<E>> {
    frozen(params, |f| {
        let out = f.student(clip)?;
        Ok(StudentOutput {
            features: detach(out.tokens)?,
            distill: out.distill.value().clone(),
        })
    })
}
