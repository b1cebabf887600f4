//! Central finite-difference gradient checking.

use super::tape::{Tape, Var};
use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / (|analytic| + |numeric| + 1e-8)`.
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// `(param, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Which coordinates to difference.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// Up to `count` coordinates drawn without replacement, seeded.
    Sample { count: usize, seed: u64 },
}

/// Compares reverse-mode gradients of a scalar function with central
/// differences `(f(θ+h) − f(θ−h)) / 2h`.
///
/// `f` receives the tape and one [`Var`] per entry of `params`; it must be
/// deterministic and return a one-element tensor.
pub fn finite_difference_check<E, F>(
    f: F,
    params: &[Tensor<E>],
    h: f64,
    coords: Coords,
) -> Result<GradCheckReport>
where
    E: Element,
    F: Fn(&Tape<E>, &[Var<E>]) -> Result<Var<E>>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("step h = {h} must be positive")));
    }
    let analytic: Vec<Tensor<E>> = {
        let tape = Tape::new();
        let vars: Vec<Var<E>> = params.iter().map(|p| tape.param(p)).collect();
        let loss = f(&tape, &vars)?;
        check_loss(&loss)?;
        let grads = tape.backward(&loss)?;
        vars.iter()
            .map(|v| grads.get(v).expect("params are tracked"))
            .collect()
    };

    let eval = |ps: &[Tensor<E>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<E>> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        check_loss(&loss)?;
        Ok(loss.item().as_f64())
    };

    let all: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.numel()).map(move |i| (p, i)))
        .collect();
    let chosen = match coords {
        Coords::All => all,
        Coords::Sample { count, seed } => {
            let mut pool = all;
            let mut rng = SplitMix64::new(seed);
            let take = count.min(pool.len());
            for i in 0..take {
                let j = i + rng.below((pool.len() - i) as u64) as usize;
                pool.swap(i, j);
            }
            pool.truncate(take);
            pool
        }
    };

    let mut work: Vec<Tensor<E>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: chosen.len(),
        worst: None,
    };
    for &(p, i) in &chosen {
        let orig = work[p].data()[i];
        work[p].data_mut()[i] = E::of(orig.as_f64() + h);
        let plus = eval(&work)?;
        work[p].data_mut()[i] = E::of(orig.as_f64() - h);
        let minus = eval(&work)?;
        work[p].data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[p].data()[i].as_f64();
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((p, i, a, numeric));
        }
    }
    Ok(report)
}

fn check_loss<E: Element>(loss: &Var<E>) -> Result<()> {
    if loss.value().numel() != 1 {
        return Err(Error::Contract("checked function must return a scalar".into()));
    }
    if !loss.item().is_finite() {
        return Err(Error::Numeric("checked function returned a non-finite value".into()));
    }
    Ok(())
}
