//! Frame-wise teacher and token-compressive student encoders.
//!
//! Both share the same front end and spatial blocks. The student interleaves
//! depthwise temporal convolutions with the spatial blocks and downsamples
//! `(t, h, w)` with strided depthwise convolutions at scheduled depths.

mod forward;
mod params;

use std::fmt;
use std::str::FromStr;

pub use forward::{
    patch_embed, spatial_attention_block, student_forward, teacher_forward, Forward, ParamVars,
    StudentOutput, StudentVars, Tokens, transformer_block,
};
pub use params::{init_params, init_student_from_teacher, ModelParams};
pub(crate) use params::{block_shapes, init_dense};

use crate::config::{ConfigFile, Reader};
use crate::error::{Error, Result};

/// Hidden width multiplier of every MLP.
pub const MLP_RATIO: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        })
    }
}

impl FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Role::Teacher),
            "student" => Ok(Role::Student),
            _ => Err(Error::Config(format!("unknown role {s:?}"))),
        }
    }
}

/// Downsampling by `stride = (s_t, s_h, s_w)` after 1-based layer `after_layer`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StrideEntry {
    pub after_layer: usize,
    pub stride: [usize; 3],
}

impl StrideEntry {
    pub fn volume(&self) -> usize {
        self.stride.iter().product()
    }
}

impl fmt::Display for StrideEntry {
    /// `2x2x2@2`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.stride;
        write!(f, "{a}x{b}x{c}@{}", self.after_layer)
    }
}

impl FromStr for StrideEntry {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("stride entry {s:?} is not of the form TxHxW@LAYER"));
        let (strides, layer) = s.trim().split_once('@').ok_or_else(bad)?;
        let parts: Vec<usize> = strides
            .split('x')
            .map(|p| p.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let stride = <[usize; 3]>::try_from(parts).map_err(|_| bad())?;
        let after_layer = layer.trim().parse().map_err(|_| bad())?;
        Ok(Self { after_layer, stride })
    }
}

pub fn parse_schedule(s: &str) -> Result<Vec<StrideEntry>> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    s.split(',').map(str::parse).collect()
}

pub fn format_schedule(schedule: &[StrideEntry]) -> String {
    if schedule.is_empty() {
        return "none".into();
    }
    schedule
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderSpec {
    pub role: Role,
    pub num_layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub input_px: usize,
    /// Taps of every temporal and strided depthwise kernel; odd.
    pub temporal_kernel: usize,
    /// Whether the student has a temporal convolution after each spatial
    /// block. Off gives the spatial-only variant.
    pub temporal_layers: bool,
    pub stride_schedule: Vec<StrideEntry>,
    /// Output width of the distillation projection (students only).
    pub distill_proj_dim: Option<usize>,
}

impl EncoderSpec {
    pub fn desk_teacher() -> Self {
        Self {
            role: Role::Teacher,
            num_layers: 8,
            dim: 48,
            heads: 4,
            patch: 4,
            input_px: 32,
            temporal_kernel: 3,
            temporal_layers: false,
            stride_schedule: Vec::new(),
            distill_proj_dim: None,
        }
    }

    pub fn desk_student() -> Self {
        Self {
            role: Role::Student,
            num_layers: 6,
            dim: 32,
            heads: 4,
            patch: 4,
            input_px: 32,
            temporal_kernel: 3,
            temporal_layers: true,
            stride_schedule: vec![
                StrideEntry { after_layer: 2, stride: [2, 2, 2] },
                StrideEntry { after_layer: 4, stride: [2, 1, 1] },
            ],
            distill_proj_dim: Some(48),
        }
    }

    /// Patch grid side `input_px / patch`.
    pub fn grid(&self) -> usize {
        self.input_px / self.patch
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if [self.num_layers, self.dim, self.heads, self.patch, self.input_px]
            .iter()
            .any(|&v| v == 0)
        {
            return err(format!("zero extent in encoder spec {self:?}"));
        }
        if self.dim % self.heads != 0 {
            return err(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.input_px % self.patch != 0 {
            return err(format!("patch {} does not divide input {}", self.patch, self.input_px));
        }
        if self.temporal_kernel % 2 == 0 {
            return err(format!("temporal kernel {} is not odd", self.temporal_kernel));
        }
        match self.role {
            Role::Teacher => {
                if !self.stride_schedule.is_empty() || self.distill_proj_dim.is_some() {
                    return err("a teacher has no stride schedule or projection".into());
                }
            }
            Role::Student => {
                if self.distill_proj_dim.is_none() {
                    return err("a student needs distill_proj_dim".into());
                }
            }
        }
        let mut prev = 0;
        let mut spatial = [1usize; 2];
        for e in &self.stride_schedule {
            if e.after_layer <= prev || e.after_layer >= self.num_layers {
                return err(format!(
                    "stride entries must be strictly increasing in 1..{}: {}",
                    self.num_layers,
                    format_schedule(&self.stride_schedule)
                ));
            }
            if e.stride.contains(&0) {
                return err(format!("zero stride in {e}"));
            }
            prev = e.after_layer;
            spatial[0] *= e.stride[1];
            spatial[1] *= e.stride[2];
        }
        if self.grid() % spatial[0] != 0 || self.grid() % spatial[1] != 0 {
            return err(format!(
                "{0}x{0} patch grid is not divisible by cumulative spatial stride {1}x{2}",
                self.grid(),
                spatial[0],
                spatial[1]
            ));
        }
        Ok(())
    }

    /// Product of all strides per axis.
    pub fn total_stride(&self) -> [usize; 3] {
        self.stride_schedule.iter().fold([1; 3], |acc, e| {
            [acc[0] * e.stride[0], acc[1] * e.stride[1], acc[2] * e.stride[2]]
        })
    }

    /// Compression ratio `r`, the product of all stride volumes.
    pub fn ratio(&self) -> usize {
        self.total_stride().iter().product()
    }

    /// Output `(t, h, w)` for a `frames`-long clip, or a shape error if the
    /// clip is not admissible.
    pub fn output_grid(&self, frames: usize) -> Result<[usize; 3]> {
        let [st, sh, sw] = self.total_stride();
        let g = self.grid();
        if frames == 0 || frames % st != 0 || g % sh != 0 || g % sw != 0 {
            return Err(Error::Shape(format!(
                "{frames} frames of {g}x{g} patches are not divisible by strides {st}x{sh}x{sw}"
            )));
        }
        Ok([frames / st, g / sh, g / sw])
    }

    /// Axes downsampled by stride entry `i`, as `(axis, stride)`.
    pub(crate) fn strided_axes(&self, i: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.stride_schedule[i]
            .stride
            .iter()
            .copied()
            .enumerate()
            .filter(|&(_, s)| s > 1)
    }

    /// Closed-form learnable parameter count.
    pub fn param_count(&self) -> usize {
        let c = self.dim;
        let hw = self.grid() * self.grid();
        let per_block = 2 * c                          // ln1
            + 3 * c * c + 3 * c                        // qkv
            + c * c + c                                // attention output
            + 2 * c                                    // ln2
            + MLP_RATIO * c * c + MLP_RATIO * c        // fc1
            + MLP_RATIO * c * c + c; // fc2
        let front = self.patch * self.patch * 3 * c + c + c + hw * c;
        let mut n = front + self.num_layers * per_block + 2 * c;
        if self.role == Role::Student {
            if self.temporal_layers {
                n += self.num_layers * self.temporal_kernel * c;
            }
            let strided: usize = self
                .stride_schedule
                .iter()
                .map(|e| e.stride.iter().filter(|&&s| s > 1).count())
                .sum();
            n += strided * self.temporal_kernel * c;
            n += c * self.distill_proj_dim.unwrap_or(0);
        }
        n
    }

    /// `key = value` lines, the inverse of [`EncoderSpec::from_reader`].
    pub fn to_kv(&self) -> String {
        let mut s = format!(
            "role = {}\nnum_layers = {}\ndim = {}\nheads = {}\npatch = {}\ninput_px = {}\n\
             temporal_kernel = {}\ntemporal_layers = {}\nstride_schedule = {}\n",
            self.role,
            self.num_layers,
            self.dim,
            self.heads,
            self.patch,
            self.input_px,
            self.temporal_kernel,
            self.temporal_layers,
            format_schedule(&self.stride_schedule)
        );
        if let Some(d) = self.distill_proj_dim {
            s.push_str(&format!("distill_proj_dim = {d}\n"));
        }
        s
    }

    /// Reads spec keys from a section, defaulting to the desk spec of
    /// `role`. The caller checks for leftover keys.
    pub fn from_reader(r: &mut Reader<'_>, role: Role) -> Result<Self> {
        let base = match role {
            Role::Teacher => Self::desk_teacher(),
            Role::Student => Self::desk_student(),
        };
        let spec = Self {
            role: r.get_or("role", role)?,
            num_layers: r.get_or("num_layers", base.num_layers)?,
            dim: r.get_or("dim", base.dim)?,
            heads: r.get_or("heads", base.heads)?,
            patch: r.get_or("patch", base.patch)?,
            input_px: r.get_or("input_px", base.input_px)?,
            temporal_kernel: r.get_or("temporal_kernel", base.temporal_kernel)?,
            temporal_layers: r.get_or("temporal_layers", base.temporal_layers)?,
            stride_schedule: r
                .get_with("stride_schedule", parse_schedule)?
                .unwrap_or(base.stride_schedule),
            distill_proj_dim: match r.raw("distill_proj_dim") {
                Some(e) if e.value == "none" => None,
                Some(e) => Some(e.value.parse().map_err(|_| {
                    Error::Config(format!("line {}: distill_proj_dim {:?}", e.line, e.value))
                })?),
                None => base.distill_proj_dim,
            },
        };
        if spec.role != role {
            return Err(r.error(format!("expected role {role}, found {}", spec.role)));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn parse(text: &str, role: Role) -> Result<Self> {
        let cfg = ConfigFile::parse(text, "<spec>")?;
        let mut r = cfg.reader("");
        let spec = Self::from_reader(&mut r, role)?;
        r.finish()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_specs_are_valid_and_compress_sixteenfold() {
        EncoderSpec::desk_teacher().validate().unwrap();
        let s = EncoderSpec::desk_student();
        s.validate().unwrap();
        assert_eq!(s.ratio(), 16);
        assert_eq!(s.output_grid(4).unwrap(), [1, 4, 4]);
        assert!(matches!(s.output_grid(6), Err(Error::Shape(_))));
    }

    #[test]
    fn schedule_round_trips_through_text() {
        let s = EncoderSpec::desk_student();
        assert_eq!(format_schedule(&s.stride_schedule), "2x2x2@2, 2x1x1@4");
        let back = EncoderSpec::parse(&s.to_kv(), Role::Student).unwrap();
        assert_eq!(back, s);
        let t = EncoderSpec::desk_teacher();
        assert_eq!(EncoderSpec::parse(&t.to_kv(), Role::Teacher).unwrap(), t);
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        let mut s = EncoderSpec::desk_student();
        s.stride_schedule[1].after_layer = 2;
        assert!(s.validate().is_err());
        let mut s = EncoderSpec::desk_student();
        s.stride_schedule[1].after_layer = 6;
        assert!(s.validate().is_err());
        let mut s = EncoderSpec::desk_student();
        s.stride_schedule[0].stride = [1, 3, 3];
        assert!(s.validate().is_err());
        let mut s = EncoderSpec::desk_student();
        s.heads = 5;
        assert!(s.validate().is_err());
        assert!("2x2@3".parse::<StrideEntry>().is_err());
    }
}
