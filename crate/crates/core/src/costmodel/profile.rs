use std::time::Instant;

use crate::error::{Error, Result};

/// Raw timings in milliseconds and their median.
#[derive(Clone, Debug, PartialEq)]
pub struct Profile {
    pub median_ms: f64,
    pub samples_ms: Vec<f64>,
}

impl Profile {
    pub fn min_ms(&self) -> f64 {
        self.samples_ms.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_ms(&self) -> f64 {
        self.samples_ms.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Runs `component` `warmup` times untimed, then `iters` times timed with a
/// monotonic clock, serially on the calling thread. An even sample count
/// takes the mean of the two middle samples as the median.
pub fn wallclock_profile(
    mut component: impl FnMut() -> Result<()>,
    warmup: usize,
    iters: usize,
) -> Result<Profile> {
    if iters == 0 {
        return Err(Error::Contract("profiling needs at least one timed iteration".into()));
    }
    for _ in 0..warmup {
        component()?;
    }
    let mut samples_ms = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        component()?;
        samples_ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mut sorted = samples_ms.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median_ms = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    Ok(Profile {
        median_ms,
        samples_ms,
    })
}
