//! Seeded synthetic video corpora with controlled temporal redundancy.
//!
//! Frames are `[px, px, 3]` with values in `[0, 1]`. Every video draws its
//! own generator from the corpus seed by [`SplitMix64::split`] in video
//! order, so a corpus is a pure function of its spec.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::config::{ConfigFile, Reader};
use crate::distill::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{ltf, Tensor};
use crate::rng::SplitMix64;

pub const MANIFEST: &str = "manifest.cfg";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Motif {
    /// A square of side `px/4` over a static textured background, moving
    /// along one random axis with wrap-around.
    MovingSquare,
    /// A sinusoidal grating of period `px/2` translating along a random
    /// direction.
    TranslatingGradient,
    /// Static per-pixel noise where each pixel is redrawn with probability
    /// `motion / px` per frame.
    BlinkingNoise,
}

impl fmt::Display for Motif {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Motif::MovingSquare => "moving_square",
            Motif::TranslatingGradient => "translating_gradient",
            Motif::BlinkingNoise => "blinking_noise",
        })
    }
}

impl FromStr for Motif {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moving_square" => Ok(Motif::MovingSquare),
            "translating_gradient" => Ok(Motif::TranslatingGradient),
            "blinking_noise" => Ok(Motif::BlinkingNoise),
            _ => Err(Error::Config(format!(
                "unknown motif {s:?} (expected moving_square|translating_gradient|blinking_noise)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideoSpec {
    pub num_videos: usize,
    pub frames: usize,
    pub px: usize,
    pub motif: Motif,
    pub motion_px_per_frame: f64,
    pub seed: u64,
    /// Nominal recording rate, used by the clip sampler.
    pub native_fps: f64,
}

impl Default for SyntheticVideoSpec {
    fn default() -> Self {
        Self {
            num_videos: 16,
            frames: 16,
            px: 32,
            motif: Motif::MovingSquare,
            motion_px_per_frame: 2.0,
            seed: 0,
            native_fps: 4.0,
        }
    }
}

impl SyntheticVideoSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_videos == 0 || self.frames == 0 || self.px < 4 {
            return Err(Error::Config(format!(
                "corpus needs videos, frames and px >= 4 (got {}, {}, {})",
                self.num_videos, self.frames, self.px
            )));
        }
        if !(self.motion_px_per_frame >= 0.0) || !self.motion_px_per_frame.is_finite() {
            return Err(Error::Config("motion_px_per_frame must be finite and >= 0".into()));
        }
        if !(self.native_fps > 0.0) {
            return Err(Error::Config("native_fps must be positive".into()));
        }
        Ok(())
    }

    pub fn from_reader(r: &mut Reader<'_>) -> Result<Self> {
        let d = Self::default();
        let spec = Self {
            num_videos: r.get_or("num_videos", d.num_videos)?,
            frames: r.get_or("frames", d.frames)?,
            px: r.get_or("px", d.px)?,
            motif: r.get_or("motif", d.motif)?,
            motion_px_per_frame: r.get_or("motion_px_per_frame", d.motion_px_per_frame)?,
            seed: r.get_or("seed", d.seed)?,
            native_fps: r.get_or("native_fps", d.native_fps)?,
        };
        spec.validate().map_err(|e| r.error(e))?;
        Ok(spec)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "num_videos = {}\nframes = {}\npx = {}\nmotif = {}\nmotion_px_per_frame = {}\nseed = {}\nnative_fps = {}\n",
            self.num_videos, self.frames, self.px, self.motif, self.motion_px_per_frame, self.seed, self.native_fps
        )
    }
}

/// All videos of the corpus, each `[frames, px, px, 3]`.
pub fn generate_videos(spec: &SyntheticVideoSpec) -> Result<Vec<Tensor<f32>>> {
    spec.validate()?;
    let mut root = SplitMix64::new(spec.seed);
    (0..spec.num_videos)
        .map(|_| {
            let mut rng = root.split();
            let frames = match spec.motif {
                Motif::MovingSquare => moving_square(spec, &mut rng),
                Motif::TranslatingGradient => translating_gradient(spec, &mut rng),
                Motif::BlinkingNoise => blinking_noise(spec, &mut rng),
            };
            Tensor::new(&[spec.frames, spec.px, spec.px, 3], frames)
        })
        .collect()
}

fn moving_square(spec: &SyntheticVideoSpec, rng: &mut SplitMix64) -> Vec<f32> {
    let px = spec.px;
    let side = px / 4;
    // Low-frequency background: a sum of two random gratings per channel.
    let waves: Vec<[f64; 4]> = (0..6)
        .map(|_| {
            [
                rng.uniform_range(-2.0, 2.0),
                rng.uniform_range(-2.0, 2.0),
                rng.uniform_range(0.0, std::f64::consts::TAU),
                rng.uniform_range(0.1, 0.25),
            ]
        })
        .collect();
    let color: Vec<f64> = (0..3).map(|_| rng.uniform()).collect();
    let (x0, y0) = (rng.uniform_range(0.0, px as f64), rng.uniform_range(0.0, px as f64));
    let dir = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]][rng.below(4) as usize];
    let mut out = Vec::with_capacity(spec.frames * px * px * 3);
    for f in 0..spec.frames {
        let shift = spec.motion_px_per_frame * f as f64;
        let sx = (x0 + dir[0] * shift).rem_euclid(px as f64).floor() as usize;
        let sy = (y0 + dir[1] * shift).rem_euclid(px as f64).floor() as usize;
        for y in 0..px {
            for x in 0..px {
                let inside = (x + px - sx) % px < side && (y + px - sy) % px < side;
                for c in 0..3 {
                    let v = if inside {
                        color[c]
                    } else {
                        let [fx, fy, ph, amp] = waves[2 * c];
                        let [gx, gy, qh, bmp] = waves[2 * c + 1];
                        let (u, v) = (x as f64 / px as f64, y as f64 / px as f64);
                        0.5 + amp * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin()
                            + bmp * (std::f64::consts::TAU * (gx * u + gy * v) + qh).sin()
                    };
                    out.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    out
}

fn translating_gradient(spec: &SyntheticVideoSpec, rng: &mut SplitMix64) -> Vec<f32> {
    let px = spec.px;
    let theta = rng.uniform_range(0.0, std::f64::consts::TAU);
    let (ct, st) = (theta.cos(), theta.sin());
    let period = px as f64 / 2.0;
    let phases: Vec<f64> = (0..3).map(|_| rng.uniform_range(0.0, std::f64::consts::TAU)).collect();
    let mut out = Vec::with_capacity(spec.frames * px * px * 3);
    for f in 0..spec.frames {
        let shift = spec.motion_px_per_frame * f as f64;
        for y in 0..px {
            for x in 0..px {
                let s = x as f64 * ct + y as f64 * st - shift;
                for ph in &phases {
                    let v = 0.5 + 0.5 * (std::f64::consts::TAU * s / period + ph).sin();
                    out.push(v as f32);
                }
            }
        }
    }
    out
}

fn blinking_noise(spec: &SyntheticVideoSpec, rng: &mut SplitMix64) -> Vec<f32> {
    let n = spec.px * spec.px * 3;
    let p = (spec.motion_px_per_frame / spec.px as f64).min(1.0);
    let mut frame: Vec<f32> = (0..n).map(|_| rng.uniform() as f32).collect();
    let mut out = Vec::with_capacity(spec.frames * n);
    for f in 0..spec.frames {
        if f > 0 && p > 0.0 {
            for px in frame.chunks_mut(3) {
                if rng.uniform() < p {
                    px.iter_mut().for_each(|v| *v = rng.uniform() as f32);
                }
            }
        }
        out.extend_from_slice(&frame);
    }
    out
}

/// Mean Pearson correlation between consecutive frames over all pixels
/// and channels. Constant frames count as perfectly correlated with an
/// identical successor.
pub fn adjacent_frame_correlation(video: &Tensor<f32>) -> f64 {
    let frames = video.shape()[0];
    let per = video.numel() / frames;
    let d = video.data();
    let corr = |a: &[f32], b: &[f32]| {
        let n = a.len() as f64;
        let ma = a.iter().map(|&x| x as f64).sum::<f64>() / n;
        let mb = b.iter().map(|&x| x as f64).sum::<f64>() / n;
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (&x, &y) in a.iter().zip(b) {
            let (x, y) = (x as f64 - ma, y as f64 - mb);
            sab += x * y;
            saa += x * x;
            sbb += y * y;
        }
        if saa == 0.0 || sbb == 0.0 {
            if a == b { 1.0 } else { 0.0 }
        } else {
            sab / (saa * sbb).sqrt()
        }
    };
    let pairs = frames.saturating_sub(1);
    if pairs == 0 {
        return 1.0;
    }
    (0..pairs)
        .map(|f| corr(&d[f * per..(f + 1) * per], &d[(f + 1) * per..(f + 2) * per]))
        .sum::<f64>()
        / pairs as f64
}

/// Writes `video_NNN.ltf` files plus a manifest holding the corpus settings and one
/// `video.NNN = <file> <shape>` line per video.
pub fn write_corpus(spec: &SyntheticVideoSpec, dir: impl AsRef<Path>) -> Result<Vec<Tensor<f32>>> {
    let dir = dir.as_ref();
    let videos = generate_videos(spec)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = spec.to_kv();
    for (i, v) in videos.iter().enumerate() {
        let file = format!("video_{i:03}.ltf");
        ltf::write(dir.join(&file), v)?;
        let shape: Vec<String> = v.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("video.{i:03} = {file} {}\n", shape.join("x")));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))?;
    Ok(videos)
}

/// Loads a corpus written by [`write_corpus`], checking every shape
/// against the manifest.
pub fn read_corpus(dir: impl AsRef<Path>) -> Result<(SyntheticVideoSpec, Dataset)> {
    let dir = dir.as_ref();
    let cfg = ConfigFile::read(dir.join(MANIFEST))?;
    if let Some(s) = cfg.sections.get(1) {
        return Err(Error::Config(format!("{}: unexpected section [{}]", dir.display(), s.name)));
    }
    let mut r = cfg.reader("");
    let spec = SyntheticVideoSpec::from_reader(&mut r)?;
    let mut videos = Vec::with_capacity(spec.num_videos);
    for i in 0..spec.num_videos {
        let key = format!("video.{i:03}");
        let value: String = r.require(&key)?;
        let (file, shape) = value
            .split_once(' ')
            .ok_or_else(|| r.error(format!("{key} needs `<file> <shape>`")))?;
        let v = ltf::read(dir.join(file))?;
        let want = [spec.frames, spec.px, spec.px, 3];
        let listed: Vec<String> = want.iter().map(usize::to_string).collect();
        if v.shape() != want || shape.trim() != listed.join("x") {
            return Err(Error::Format {
                path: dir.join(file),
                msg: format!("shape {:?} does not match manifest {shape}", v.shape()),
            });
        }
        videos.push(v);
    }
    r.finish()?;
    let native_fps = spec.native_fps;
    Ok((spec, Dataset { videos, native_fps }))
}
