use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moments per parameter, positionally matched to the
/// parameter list passed to [`adamw_step`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

/// Decoupled weight decay `θ ← θ − lr·wd·θ`, then a bias-corrected Adam
/// update. All gradients are checked before any parameter changes.
pub fn adamw_step<E: Element>(
    params: &mut [&mut Tensor<E>],
    grads: &[&Tensor<E>],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Dimension(format!(
            "{} parameters, {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if !(lr >= 0.0) {
        return Err(Error::Contract(format!("learning rate {lr} is negative")));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "parameter {i}: {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {i}")));
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len()
        || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel())
    {
        return Err(Error::Dimension("optimizer state does not match parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, (w, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gi = gi.as_f64();
            let mut x = w.as_f64();
            x -= lr * weight_decay * x;
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
            x -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
            *w = E::of(x);
        }
    }
    Ok(())
}

/// Global L2 norm over all gradients.
pub fn global_norm<E: Element>(grads: &[&Tensor<E>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x.as_f64().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns `(norm before, norm after)`.
pub fn clip_global_norm<E: Element>(grads: &mut [Tensor<E>], max_norm: f64) -> (f64, f64) {
    let before = global_norm(&grads.iter().collect::<Vec<_>>());
    if before > max_norm && before > 0.0 {
        let s = E::of(max_norm / before);
        grads
            .iter_mut()
            .for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
    }
    let after = global_norm(&grads.iter().collect::<Vec<_>>());
    (before, after)
}
