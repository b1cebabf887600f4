//! Analytic FLOPs and parameter counts for encoder variants and LLM
//! prefill, plus a wall-clock harness.
//!
//! Convention: one multiply-accumulate is two FLOPs. Layer norms, softmax,
//! bias adds, activations and the patch embedding are not counted.

mod profile;

use std::fmt;
use std::str::FromStr;

pub use profile::{wallclock_profile, Profile};

use crate::encoder::{EncoderSpec, StrideEntry, MLP_RATIO};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    /// Independent image encoder per frame.
    FrameWiseVit,
    /// Spatial blocks interleaved with attention along time at each position.
    TempAttn,
    /// Joint attention over every token of a clip; no separate temporal op.
    SpatioTempAttn,
    /// Spatial blocks interleaved with dense `d → d` temporal convolutions.
    TempConv,
    /// Spatial blocks interleaved with depthwise temporal convolutions.
    DwTempConv,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::FrameWiseVit,
        Family::TempAttn,
        Family::SpatioTempAttn,
        Family::TempConv,
        Family::DwTempConv,
    ];
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::FrameWiseVit => "frame_wise_vit",
            Family::TempAttn => "temp_attn",
            Family::SpatioTempAttn => "spatio_temp_attn",
            Family::TempConv => "temp_conv",
            Family::DwTempConv => "dw_temp_conv",
        })
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown encoder family {s:?}")))
    }
}

/// Encoder geometry for cost counting. Clip-wise families process
/// `clip_frames` frames jointly; a trailing partial clip is costed as a
/// shorter clip.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub family: Family,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    /// Patch tokens plus one class token; the patch grid must be square.
    pub tokens_per_frame: usize,
    pub mlp_ratio: usize,
    pub temporal_kernel: usize,
    pub stride_schedule: Vec<StrideEntry>,
    pub clip_frames: usize,
}

impl ArchSpec {
    fn base(family: Family, layers: usize, dim: usize, heads: usize) -> Self {
        Self {
            family,
            layers,
            dim,
            heads,
            tokens_per_frame: 1025,
            mlp_ratio: 4,
            temporal_kernel: 3,
            stride_schedule: Vec::new(),
            clip_frames: 4,
        }
    }

    /// 24-layer, 1024-wide frame-wise ViT-Large at 448 px / patch 14.
    pub fn vit_large_teacher() -> Self {
        Self::base(Family::FrameWiseVit, 24, 1024, 16)
    }

    /// 12-layer, 768-wide frame-wise ViT-Base without compression.
    pub fn vit_base_framewise() -> Self {
        Self::base(Family::FrameWiseVit, 12, 768, 12)
    }

    /// ViT-Base student of `family` with strides `2x2x2` after block 4
    /// and `2x1x1` after block 8, i.e. 16x fewer tokens per clip.
    pub fn vit_base_student(family: Family) -> Self {
        Self {
            stride_schedule: vec![
                StrideEntry { after_layer: 4, stride: [2, 2, 2] },
                StrideEntry { after_layer: 8, stride: [2, 1, 1] },
            ],
            ..Self::base(family, 12, 768, 12)
        }
    }

    /// Geometry of a concrete encoder. Students count as
    /// [`Family::DwTempConv`]; a spatial-only student is charged for
    /// temporal taps it does not run, a small overestimate.
    pub fn from_encoder(spec: &EncoderSpec, clip_frames: usize) -> Self {
        let family = if spec.distill_proj_dim.is_some() {
            Family::DwTempConv
        } else {
            Family::FrameWiseVit
        };
        let g = spec.grid();
        Self {
            family,
            layers: spec.num_layers,
            dim: spec.dim,
            heads: spec.heads,
            tokens_per_frame: g * g + 1,
            mlp_ratio: MLP_RATIO,
            temporal_kernel: spec.temporal_kernel,
            stride_schedule: spec.stride_schedule.clone(),
            clip_frames,
        }
    }

    pub fn grid(&self) -> Option<usize> {
        let p = self.tokens_per_frame.checked_sub(1)?;
        let g = (p as f64).sqrt().round() as usize;
        (g >= 1 && g * g == p).then_some(g)
    }

    /// Token compression ratio of the stride schedule.
    pub fn ratio(&self) -> usize {
        self.stride_schedule.iter().map(StrideEntry::volume).product()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return err(format!(
                "{} layers, dim {}, {} heads is not admissible",
                self.layers, self.dim, self.heads
            ));
        }
        let Some(g) = self.grid() else {
            return err(format!(
                "tokens_per_frame {} is not a square patch grid plus a class token",
                self.tokens_per_frame
            ));
        };
        if self.mlp_ratio == 0 || self.clip_frames == 0 {
            return err("mlp_ratio and clip_frames must be positive".into());
        }
        if self.temporal_kernel % 2 == 0 {
            return err(format!("temporal kernel {} is even", self.temporal_kernel));
        }
        if self.family == Family::FrameWiseVit && !self.stride_schedule.is_empty() {
            return err("frame-wise encoders cannot downsample across frames".into());
        }
        let mut last = 0;
        let mut ext = [self.clip_frames, g, g];
        for e in &self.stride_schedule {
            if e.after_layer <= last || e.after_layer > self.layers {
                return err(format!("stride entry {e} is out of order or past layer {}", self.layers));
            }
            last = e.after_layer;
            for (x, &s) in ext.iter_mut().zip(&e.stride) {
                if s == 0 || *x % s != 0 {
                    return err(format!("stride entry {e} does not divide extent {x}"));
                }
                *x /= s;
            }
        }
        Ok(())
    }

    /// Parameters of the blocks, temporal operators, strided kernels and
    /// final norm. Embeddings are excluded, like their FLOPs.
    pub fn params(&self) -> u64 {
        let (d, m, k) = (self.dim as u64, self.mlp_ratio as u64, self.temporal_kernel as u64);
        let block = 4 * d * d + 4 * d + 2 * m * d * d + m * d + d + 4 * d;
        let temporal = match self.family {
            Family::FrameWiseVit | Family::SpatioTempAttn => 0,
            Family::DwTempConv => k * d,
            Family::TempConv => k * d * d + d,
            Family::TempAttn => 4 * d * d + 4 * d + 2 * d,
        };
        let strided: u64 = self
            .stride_schedule
            .iter()
            .map(|e| e.stride.iter().filter(|&&s| s > 1).count() as u64 * k * d)
            .sum();
        self.layers as u64 * (block + temporal) + strided + 2 * d
    }

    /// FLOPs of one clip of `t` frames (or one frame for frame-wise).
    fn clip_flops(&self, t: usize) -> u128 {
        let g = self.grid().expect("validated");
        let (d, m, k) = (self.dim as u128, self.mlp_ratio as u128, self.temporal_kernel as u128);
        let (mut t, mut h, mut w) = (t as u128, g as u128, g as u128);
        let mut total = 0u128;
        for l in 1..=self.layers {
            let slice = h * w + 1;
            let n = t * slice;
            total += 2 * 4 * n * d * d + 2 * 2 * m * n * d * d;
            total += if self.family == Family::SpatioTempAttn {
                2 * 2 * n * n * d
            } else {
                t * 2 * 2 * slice * slice * d
            };
            if t > 1 {
                total += match self.family {
                    Family::DwTempConv => 2 * n * d * k,
                    Family::TempConv => 2 * n * d * d * k,
                    Family::TempAttn => 2 * 4 * n * d * d + slice * 2 * 2 * t * t * d,
                    Family::FrameWiseVit | Family::SpatioTempAttn => 0,
                };
            }
            if let Some(e) = self.stride_schedule.iter().find(|e| e.after_layer == l) {
                for (axis, &s) in e.stride.iter().enumerate() {
                    if s == 1 {
                        continue;
                    }
                    let s = s as u128;
                    match axis {
                        0 => t = t.div_ceil(s),
                        1 => h = h.div_ceil(s),
                        _ => w = w.div_ceil(s),
                    }
                    let out = t * h * w + if axis == 0 { t } else { 0 };
                    total += 2 * out * d * k;
                }
            }
        }
        total
    }
}

/// Cost of encoding `frames` frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VitCost {
    pub flops: u128,
    pub params: u64,
}

/// Per layer with `N` tokens of width `d`: `8Nd²` for the QKV and output
/// projections, `4·n²·d` for scores and mixing per attention group of `n`
/// tokens, `4·mlp·N·d²` for the MLP, plus the family's temporal operator
/// and strided downsampling. Frame-wise encoders cost `frames` single
/// frames; clip-wise encoders cost `⌈frames / clip_frames⌉` clips.
pub fn vit_flops(spec: &ArchSpec, frames: usize) -> Result<VitCost> {
    spec.validate()?;
    let flops = if spec.family == Family::FrameWiseVit {
        frames as u128 * spec.clip_flops(1)
    } else {
        let (full, rest) = (frames / spec.clip_frames, frames % spec.clip_frames);
        full as u128 * spec.clip_flops(spec.clip_frames) + if rest > 0 { spec.clip_flops(rest) } else { 0 }
    };
    Ok(VitCost {
        flops,
        params: spec.params(),
    })
}

/// Decoder-only LLM geometry. K and V projections shrink by
/// `kv_heads / query_heads` under grouped-query attention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LlmSpec {
    pub layers: usize,
    pub dim: usize,
    /// Matrices-equivalent MLP width: the MLP costs `4·mlp_ratio·n·d²`.
    pub mlp_ratio: usize,
    pub query_heads: usize,
    pub kv_heads: usize,
}

impl LlmSpec {
    /// 28 layers, width 3584, 28 query and 4 key/value heads. The gated
    /// MLP of width 18944 has three matrices, `3·18944 ≈ 2·8·3584`.
    pub fn qwen2_5_7b() -> Self {
        Self {
            layers: 28,
            dim: 3584,
            mlp_ratio: 8,
            query_heads: 28,
            kv_heads: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.dim == 0
            || self.mlp_ratio == 0
            || self.query_heads == 0
            || self.kv_heads == 0
            || self.kv_heads > self.query_heads
            || self.query_heads % self.kv_heads != 0
        {
            return Err(Error::Config(format!("LLM spec {self:?} is not admissible")));
        }
        Ok(())
    }
}

/// Prefill FLOPs over `n` tokens: per layer `2·n·d²·(2 + 2·kv/q)` for the
/// projections, `4·n²·d` for attention and `4·mlp·n·d²` for the MLP.
pub fn llm_prefill_flops(spec: &LlmSpec, n: usize) -> Result<u128> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Contract("prefill needs at least one token".into()));
    }
    let (n, d, m) = (n as u128, spec.dim as u128, spec.mlp_ratio as u128);
    let (q, kv) = (spec.query_heads as u128, spec.kv_heads as u128);
    let proj = 2 * n * d * d * 2 + 2 * n * d * d * 2 * kv / q;
    let per_layer = proj + 2 * 2 * n * n * d + 2 * 2 * m * n * d * d;
    Ok(spec.layers as u128 * per_layer)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// Every visual token reaches the LLM.
    None,
    /// WAP after the full encoder divides LLM tokens by `r`.
    Posthoc(usize),
    /// A compressive student divides encoder and LLM tokens by `r`.
    Internal(usize),
}

impl Strategy {
    pub fn ratio(self) -> usize {
        match self {
            Strategy::None => 1,
            Strategy::Posthoc(r) | Strategy::Internal(r) => r,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::None => f.write_str("none"),
            Strategy::Posthoc(r) => write!(f, "posthoc({r})"),
            Strategy::Internal(r) => write!(f, "internal({r})"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "none" {
            return Ok(Strategy::None);
        }
        let parse = |prefix: &str| -> Option<usize> {
            s.strip_prefix(prefix)?.strip_prefix('(')?.strip_suffix(')')?.trim().parse().ok()
        };
        let st = if let Some(r) = parse("posthoc") {
            Strategy::Posthoc(r)
        } else if let Some(r) = parse("internal") {
            Strategy::Internal(r)
        } else {
            return Err(Error::Config(format!(
                "unknown strategy {s:?} (expected none, posthoc(r) or internal(r))"
            )));
        };
        if st.ratio() == 0 {
            return Err(Error::Config(format!("strategy {s} needs r >= 1")));
        }
        Ok(st)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Vision,
    Llm,
}

/// One end-to-end cost breakdown.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub frames: usize,
    pub strategy: Strategy,
    pub tokens_into_llm: usize,
    pub flops_vision: u128,
    /// Post-hoc WAP: logits and weighted sums over every patch token.
    pub flops_auxiliary: u128,
    pub flops_llm_prefill: u128,
    pub flops_total: u128,
    pub params_vision: u64,
    pub latency_vision_ms: Option<f64>,
    pub latency_total_ms: Option<f64>,
}

impl CostReport {
    /// Larger of the two FLOPs components; post-hoc pooling counts toward
    /// vision.
    pub fn dominant(&self) -> Component {
        if self.flops_vision + self.flops_auxiliary > self.flops_llm_prefill {
            Component::Vision
        } else {
            Component::Llm
        }
    }

    pub const CSV_HEADER: &'static str = "frames,strategy,flops_vision,flops_llm,flops_total,tokens_llm";

    /// One CSV row; latency columns only when measured.
    pub fn csv_row(&self) -> String {
        let mut row = format!(
            "{},{},{},{},{},{}",
            self.frames,
            self.strategy,
            self.flops_vision + self.flops_auxiliary,
            self.flops_llm_prefill,
            self.flops_total,
            self.tokens_into_llm
        );
        if let (Some(v), Some(t)) = (self.latency_vision_ms, self.latency_total_ms) {
            row.push_str(&format!(",{v},{t}"));
        }
        row
    }
}

/// Cost of feeding `frames` frames through an encoder and the LLM.
///
/// `none` and `posthoc(r)` run `teacher`; `internal(r)` runs `student`,
/// whose stride schedule must compress by exactly `r`. The LLM sees
/// `⌈frames · tokens_per_frame / r⌉` tokens.
pub fn bottleneck_report(
    teacher: &ArchSpec,
    student: &ArchSpec,
    llm: &LlmSpec,
    strategy: Strategy,
    frames: usize,
    tokens_per_frame: usize,
) -> Result<CostReport> {
    if frames == 0 || tokens_per_frame == 0 {
        return Err(Error::Config("frames and tokens_per_frame must be positive".into()));
    }
    let r = strategy.ratio();
    if r == 0 {
        return Err(Error::Config("compression ratio must be >= 1".into()));
    }
    let (vision, aux) = match strategy {
        Strategy::None => (vit_flops(teacher, frames)?, 0),
        Strategy::Posthoc(_) => {
            let patches = (frames * (teacher.tokens_per_frame - 1)) as u128;
            (vit_flops(teacher, frames)?, 2 * 2 * patches * teacher.dim as u128)
        }
        Strategy::Internal(_) => {
            if student.ratio() != r {
                return Err(Error::Config(format!(
                    "student compresses {}x, strategy asks for {r}x",
                    student.ratio()
                )));
            }
            (vit_flops(student, frames)?, 0)
        }
    };
    let tokens_into_llm = (frames * tokens_per_frame).div_ceil(r);
    let llm_flops = llm_prefill_flops(llm, tokens_into_llm)?;
    Ok(CostReport {
        frames,
        strategy,
        tokens_into_llm,
        flops_vision: vision.flops,
        flops_auxiliary: aux,
        flops_llm_prefill: llm_flops,
        flops_total: vision.flops + aux + llm_flops,
        params_vision: vision.params,
        latency_vision_ms: None,
        latency_total_ms: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn single_layer(n: usize, d: usize) -> ArchSpec {
        let g = ((n - 1) as f64).sqrt() as usize;
        assert_eq!(g * g + 1, n);
        ArchSpec {
            family: Family::FrameWiseVit,
            layers: 1,
            dim: d,
            heads: 1,
            tokens_per_frame: n,
            mlp_ratio: 4,
            temporal_kernel: 3,
            stride_schedule: vec![],
            clip_frames: 1,
        }
    }

    #[test]
    fn single_layer_matches_hand_enumeration() {
        // N = 2 tokens, d = 4. Count each product by hand:
        // Q, K, V, out: 4 matrices · 2 tokens · 16 MACs = 128
        // scores 2·2·4 = 16, mixing 2·2·4 = 16
        // fc1 2·4·16 = 128, fc2 2·16·4 = 128
        let macs = 128 + 16 + 16 + 128 + 128;
        let cost = vit_flops(&single_layer(2, 4), 1).unwrap();
        assert_eq!(cost.flops, 2 * macs);
        assert_eq!(vit_flops(&single_layer(2, 4), 3).unwrap().flops, 6 * macs);
        // weights 4·16 + 2·64, biases 12 + 4 + 16 + 4, two norms 16, final norm 8
        assert_eq!(cost.params, 64 + 128 + 36 + 16 + 8);
    }

    #[test]
    fn llm_small_spec_matches_hand_enumeration() {
        // n = 3, d = 4, mlp 2, 2 query heads sharing 1 kv head.
        // Q, out: 2·3·16 = 96 MACs; K, V at half width: 2·3·8 = 48
        // scores + mixing: 2·9·4 = 72; MLP: 2·3·(4·8) = 192
        let spec = LlmSpec { layers: 2, dim: 4, mlp_ratio: 2, query_heads: 2, kv_heads: 1 };
        assert_eq!(llm_prefill_flops(&spec, 3).unwrap(), 2 * 2 * (96 + 48 + 72 + 192));
    }

    #[test]
    fn llm_single_token_and_homogeneity() {
        let s = LlmSpec { layers: 1, dim: 8, mlp_ratio: 4, query_heads: 4, kv_heads: 4 };
        let linear = |n: u128| n * (8 * 64 + 16 * 64);
        assert_eq!(llm_prefill_flops(&s, 1).unwrap() - linear(1), 2 * 2 * 8);
        let quad = |n: usize| llm_prefill_flops(&s, n).unwrap() - linear(n as u128);
        assert_eq!(quad(10), 4 * quad(5));
        assert_eq!(linear(10), 2 * linear(5));
        assert!(llm_prefill_flops(&s, 0).is_err());
    }

    #[test]
    fn strided_schedules_shrink_tokens() {
        let s = ArchSpec::vit_base_student(Family::DwTempConv);
        s.validate().unwrap();
        assert_eq!(s.ratio(), 16);
        let frames = vit_flops(&ArchSpec::vit_base_framewise(), 4).unwrap().flops;
        assert!(vit_flops(&s, 4).unwrap().flops < frames);
        let mut bad = s.clone();
        bad.stride_schedule[1].after_layer = 13;
        assert!(matches!(vit_flops(&bad, 4), Err(Error::Config(_))));
        let mut odd = s;
        odd.tokens_per_frame = 1024;
        assert!(odd.validate().is_err());
    }

    #[test]
    fn strategy_round_trips() {
        for s in [Strategy::None, Strategy::Posthoc(16), Strategy::Internal(4)] {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
        assert!("posthoc(0)".parse::<Strategy>().is_err());
        assert!("later(2)".parse::<Strategy>().is_err());
    }

    #[test]
    fn unit_ratio_posthoc_sends_every_token() {
        let (t, s, l) = (ArchSpec::vit_large_teacher(), ArchSpec::vit_base_student(Family::DwTempConv), LlmSpec::qwen2_5_7b());
        let a = bottleneck_report(&t, &s, &l, Strategy::None, 8, 256).unwrap();
        let b = bottleneck_report(&t, &s, &l, Strategy::Posthoc(1), 8, 256).unwrap();
        assert_eq!(a.tokens_into_llm, b.tokens_into_llm);
        assert_eq!(a.flops_vision, b.flops_vision);
        assert!(bottleneck_report(&t, &s, &l, Strategy::Internal(8), 8, 256).is_err());
    }

    proptest! {
        #[test]
        fn costs_grow_with_frames_layers_and_width(
            frames in 1usize..64, layers in 1usize..6, heads in 1usize..4, fam in 0usize..5,
        ) {
            let dim = heads * 8;
            let mut a = ArchSpec { family: Family::ALL[fam], layers, dim, heads, tokens_per_frame: 17, mlp_ratio: 4, temporal_kernel: 3, stride_schedule: vec![], clip_frames: 4 };
            let f = |a: &ArchSpec, fr: usize| vit_flops(a, fr).unwrap().flops;
            let base = f(&a, frames);
            prop_assert!(f(&a, frames + 1) > base);
            a.layers += 1;
            prop_assert!(f(&a, frames) > base);
            a.layers -= 1;
            a.dim += heads;
            prop_assert!(f(&a, frames) > base);

            let l = LlmSpec { layers, dim, mlp_ratio: 4, query_heads: heads, kv_heads: 1 };
            let p = llm_prefill_flops(&l, frames).unwrap();
            prop_assert!(llm_prefill_flops(&l, frames + 1).unwrap() > p);
            let deeper = LlmSpec { layers: layers + 1, ..l.clone() };
            let wider = LlmSpec { dim: dim + heads, ..l };
            prop_assert!(llm_prefill_flops(&deeper, frames).unwrap() > p);
            prop_assert!(llm_prefill_flops(&wider, frames).unwrap() > p);
        }

        #[test]
        fn report_components_sum_and_internal_beats_posthoc(frames in 1usize..300, tpf in 1usize..300) {
            let (t, s, l) = (ArchSpec::vit_large_teacher(), ArchSpec::vit_base_student(Family::DwTempConv), LlmSpec::qwen2_5_7b());
            let post = bottleneck_report(&t, &s, &l, Strategy::Posthoc(16), frames, tpf).unwrap();
            let int = bottleneck_report(&t, &s, &l, Strategy::Internal(16), frames, tpf).unwrap();
            for r in [&post, &int] {
                prop_assert_eq!(r.flops_total, r.flops_vision + r.flops_auxiliary + r.flops_llm_prefill);
            }
            prop_assert!(int.flops_vision < post.flops_vision);
            prop_assert_eq!(int.flops_llm_prefill, post.flops_llm_prefill);
        }
    }
}
