use super::TrainConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::SplitMix64;

/// Videos `[F, px, px, 3]` recorded at a common native frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub videos: Vec<Tensor<f32>>,
    pub native_fps: f64,
}

/// `φ − 1`, the additive step of the rate sequence.
const GOLDEN: f64 = 0.618_033_988_749_894_9;

/// Draws training clips at random frame rates.
///
/// Call `k` uses the rate quantile `frac(u₀ + k·(φ−1))` with `u₀` uniform
/// from the seed: every rate is marginally uniform over the range and the
/// sequence covers it evenly. Start frames and video choices come from the
/// seeded generator, so the output depends only on the seed and call index.
#[derive(Clone, Debug)]
pub struct ClipSampler {
    rng: SplitMix64,
    phase: f64,
    calls: u64,
}

impl ClipSampler {
    pub fn new(seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let phase = rng.uniform();
        Self {
            rng,
            phase,
            calls: 0,
        }
    }

    pub fn next_rate(&mut self, cfg: &TrainConfig) -> f64 {
        let u = (self.phase + self.calls as f64 * GOLDEN).fract();
        self.calls += 1;
        let (lo, hi) = cfg.fps_range;
        lo + (hi - lo) * u
    }

    /// Uniform index in `0..n`.
    pub fn pick(&mut self, n: usize) -> usize {
        self.rng.below(n as u64) as usize
    }

    /// `clip_frames` frames at a uniformly drawn rate: frame `i` of the clip
    /// is video frame `start + round(i · native_fps / rate)`, with `start`
    /// uniform over the starts that keep the clip inside the video.
    pub fn sample_clip(
        &mut self,
        video: &Tensor<f32>,
        native_fps: f64,
        cfg: &TrainConfig,
    ) -> Result<Tensor<f32>> {
        let s = video.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::Dimension(format!("video {s:?} is not F×H×W×3")));
        }
        if !(native_fps > 0.0) {
            return Err(Error::Sampling(format!("native rate {native_fps} is not positive")));
        }
        let frames = s[0];
        let n = cfg.clip_frames;
        let span = |rate: f64| ((n - 1) as f64 * native_fps / rate).round() as usize;
        let longest = span(cfg.fps_range.0);
        if longest + 1 > frames {
            return Err(Error::Sampling(format!(
                "{frames}-frame video cannot hold {n} frames at {} fps (native {native_fps})",
                cfg.fps_range.0
            )));
        }
        let rate = self.next_rate(cfg);
        let step = native_fps / rate;
        let start = self.pick(frames - span(rate));
        let per = video.numel() / frames;
        let mut data = Vec::with_capacity(n * per);
        for i in 0..n {
            let f = start + (i as f64 * step).round() as usize;
            data.extend_from_slice(&video.data()[f * per..(f + 1) * per]);
        }
        Tensor::new(&[n, s[1], s[2], 3], data)
    }
}
