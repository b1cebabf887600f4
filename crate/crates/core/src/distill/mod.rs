//! Compressed and reconstructive token distillation.
//!
//! The student learns to predict the teacher's features after WAP
//! compression (CTD), or, as an ablation, to let a small decoder rebuild
//! the teacher's dense features from the student's compressed tokens (RTD).

mod loss;
mod optim;
mod sample;
mod train;

use std::fmt;
use std::str::FromStr;

pub use loss::{ctd_loss, ctd_target, rtd_decoder_forward, rtd_loss, RtdDecoder, DECODER_BLOCKS};
pub use optim::{adamw_step, clip_global_norm, global_norm, OptimizerState, BETA1, BETA2, EPS};
pub use sample::{ClipSampler, Dataset};
pub use train::{train, StepRecord, TrainLog};

use crate::config::{parse_list, Reader};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Ctd,
    Rtd,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Ctd => "ctd",
            Objective::Rtd => "rtd",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ctd" => Ok(Objective::Ctd),
            "rtd" => Ok(Objective::Rtd),
            _ => Err(Error::Config(format!("unknown objective {s:?} (expected ctd|rtd)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    /// Residuals beyond `outlier_sigma · σ` are clamped.
    pub outlier_sigma: f64,
    pub seed: u64,
    pub objective: Objective,
    pub clip_frames: usize,
    /// Sampling rates in frames per second, drawn uniformly.
    pub fps_range: (f64, f64),
    /// Save a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            warmup_steps: 50,
            total_steps: 300,
            batch_size: 8,
            weight_decay: 0.05,
            grad_clip_norm: 1.0,
            outlier_sigma: 3.0,
            seed: 0,
            objective: Objective::Ctd,
            clip_frames: 4,
            fps_range: (1.0, 4.0),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        // A zero-step run has no schedule to violate.
        if self.total_steps > 0 && self.warmup_steps > self.total_steps {
            return err(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size == 0 || self.clip_frames == 0 {
            return err("batch_size and clip_frames must be positive".into());
        }
        if !(self.peak_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return err("peak_lr and weight_decay must be nonnegative".into());
        }
        if !(self.grad_clip_norm > 0.0) || !(self.outlier_sigma > 0.0) {
            return err("grad_clip_norm and outlier_sigma must be positive".into());
        }
        let (lo, hi) = self.fps_range;
        if !(lo > 0.0) || !(hi >= lo) || !hi.is_finite() {
            return err(format!("fps_range {lo}, {hi} is not a positive interval"));
        }
        Ok(())
    }

    /// Reads the `[train]` keys it knows, defaulting the rest. The caller
    /// checks for leftover keys.
    pub fn from_reader(r: &mut Reader<'_>) -> Result<Self> {
        let d = Self::default();
        let fps_range = match r.get_with("fps_range", |s| parse_list::<f64>(s))? {
            None => d.fps_range,
            Some(v) if v.len() == 2 => (v[0], v[1]),
            Some(v) => return Err(r.error(format!("fps_range needs two values, got {}", v.len()))),
        };
        let cfg = Self {
            peak_lr: r.get_or("peak_lr", d.peak_lr)?,
            warmup_steps: r.get_or("warmup_steps", d.warmup_steps)?,
            total_steps: r.get_or("total_steps", d.total_steps)?,
            batch_size: r.get_or("batch_size", d.batch_size)?,
            weight_decay: r.get_or("weight_decay", d.weight_decay)?,
            grad_clip_norm: r.get_or("grad_clip_norm", d.grad_clip_norm)?,
            outlier_sigma: r.get_or("outlier_sigma", d.outlier_sigma)?,
            seed: r.get_or("seed", d.seed)?,
            objective: r.get_or("objective", d.objective)?,
            clip_frames: r.get_or("clip_frames", d.clip_frames)?,
            fps_range,
            checkpoint_every: r.get_or("checkpoint_every", d.checkpoint_every)?,
        };
        cfg.validate().map_err(|e| r.error(e))?;
        Ok(cfg)
    }

    /// `key = value` lines readable by [`TrainConfig::from_reader`].
    pub fn to_kv(&self) -> String {
        format!(
            "peak_lr = {}\nwarmup_steps = {}\ntotal_steps = {}\nbatch_size = {}\n\
             weight_decay = {}\ngrad_clip_norm = {}\noutlier_sigma = {}\nseed = {}\n\
             objective = {}\nclip_frames = {}\nfps_range = {}, {}\ncheckpoint_every = {}\n",
            self.peak_lr,
            self.warmup_steps,
            self.total_steps,
            self.batch_size,
            self.weight_decay,
            self.grad_clip_norm,
            self.outlier_sigma,
            self.seed,
            self.objective,
            self.clip_frames,
            self.fps_range.0,
            self.fps_range.1,
            self.checkpoint_every
        )
    }
}

/// Linear warmup from 0 to `peak_lr` over `warmup_steps`, then cosine
/// decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let (w, n) = (cfg.warmup_steps, cfg.total_steps);
    let step = step.min(n);
    if step < w {
        return cfg.peak_lr * step as f64 / w as f64;
    }
    if n == w {
        return cfg.peak_lr;
    }
    let progress = (step - w) as f64 / (n - w) as f64;
    cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ConfigFile;
    use proptest::prelude::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 0.0);
        assert_eq!(lr_schedule(cfg.warmup_steps, &cfg), cfg.peak_lr);
        assert!(lr_schedule(cfg.total_steps, &cfg).abs() < 1e-18);
        assert!((lr_schedule(25, &cfg) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn config_round_trips_and_validates() {
        let cfg = TrainConfig {
            objective: Objective::Rtd,
            fps_range: (0.5, 2.0),
            seed: 7,
            ..TrainConfig::default()
        };
        let text = format!("[train]\n{}", cfg.to_kv());
        let file = ConfigFile::parse(&text, "t.cfg").unwrap();
        let mut r = file.reader("train");
        assert_eq!(TrainConfig::from_reader(&mut r).unwrap(), cfg);
        r.finish().unwrap();

        let bad = TrainConfig {
            warmup_steps: 400,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn schedule_rises_then_falls(warmup in 0usize..50, extra in 0usize..200, peak in 1e-5f64..1.0) {
            let cfg = TrainConfig { warmup_steps: warmup, total_steps: warmup + extra, peak_lr: peak, ..TrainConfig::default() };
            for s in 0..warmup {
                prop_assert!(lr_schedule(s + 1, &cfg) >= lr_schedule(s, &cfg));
            }
            for s in warmup..warmup + extra {
                prop_assert!(lr_schedule(s + 1, &cfg) <= lr_schedule(s, &cfg));
            }
        }
    }
}
