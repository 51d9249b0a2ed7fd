//! Adaptive-moment (Adam) updates with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    /// Number of applied updates (drives bias correction).
    pub step: u64,
    /// Updates skipped because of non-finite gradients.
    pub skipped: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .ids()
            .map(|id| {
                let (r, c) = params.get(id).shape();
                Tensor::zeros(r, c)
            })
            .collect();
        Self {
            step: 0,
            skipped: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was NaN or infinite; nothing changed except the skip
    /// counter.
    Skipped,
}

/// Global L2 norm over the trainable gradients.
pub fn grad_norm<T: Scalar>(grads: &[Tensor<T>], trainable: Option<&[bool]>) -> f64 {
    grads
        .iter()
        .enumerate()
        .filter(|(i, _)| trainable.map_or(true, |m| m[*i]))
        .flat_map(|(_, g)| g.as_slice())
        .map(|v| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], trainable: Option<&[bool]>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads, trainable);
    if norm.is_finite() && norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

/// One bias-corrected Adam update of the parameters flagged in `trainable`
/// (all when `None`). Frozen parameters and their moments are untouched.
pub fn adaptive_moment_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: T,
    cfg: &AdamConfig,
    trainable: Option<&[bool]>,
) -> Result<StepOutcome> {
    check_dim("gradient count", params.len(), grads.len())?;
    check_dim("moment count", params.len(), state.m.len())?;
    if let Some(mask) = trainable {
        check_dim("trainable mask", params.len(), mask.len())?;
    }
    let active = |i: usize| trainable.map_or(true, |m| m[i]);
    for (i, (id, g)) in params.ids().zip(grads).enumerate() {
        if g.shape() != params.get(id).shape() {
            return Err(crate::error::DvaeError::Contract(format!(
                "gradient of {} has shape {:?}, parameter has {:?}",
                params.entry(id).name,
                g.shape(),
                params.get(id).shape()
            )));
        }
        if active(i) && !g.all_finite() {
            state.skipped += 1;
            log::warn!(
                "non-finite gradient for {}; update skipped ({} so far)",
                params.entry(id).name,
                state.skipped
            );
            return Ok(StepOutcome::Skipped);
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let c1 = T::lit(1.0 - cfg.beta1.powi(t));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t));
    let eps = T::lit(cfg.eps);
    let ids: Vec<_> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        if !active(i) {
            continue;
        }
        let p = params.get_mut(id).as_mut_slice();
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grads[i].as_slice()) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(StepOutcome::Applied)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.add("w", "g", Tensor::filled(1, 1, v));
        p
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_param(0.5);
        let mut s = AdamState::new(&p);
        let g = vec![Tensor::filled(1, 1, 1.0)];
        adaptive_moment_step(&mut p, &g, &mut s, 1e-3, &AdamConfig::default(), None).unwrap();
        let moved = 0.5 - p.flatten()[0];
        assert!((moved - 1e-3).abs() < 1e-10, "{moved}");
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar_param(0.5);
        let mut s = AdamState::new(&p);
        let g = vec![Tensor::zeros(1, 1)];
        adaptive_moment_step(&mut p, &g, &mut s, 1e-3, &AdamConfig::default(), None).unwrap();
        assert_eq!(p.flatten()[0], 0.5);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut p = scalar_param(0.5);
        let mut s = AdamState::new(&p);
        let g = vec![Tensor::filled(1, 1, f64::NAN)];
        let out = adaptive_moment_step(&mut p, &g, &mut s, 1e-3, &AdamConfig::default(), None).unwrap();
        assert_eq!(out, StepOutcome::Skipped);
        assert_eq!((s.step, s.skipped), (0, 1));
        assert_eq!(p.flatten()[0], 0.5);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Tensor::filled(2, 2, 3.0), Tensor::filled(1, 3, -4.0)];
        let before = clip_grad_norm(&mut g, None, 1.0);
        assert!((before - (36.0f64 + 48.0).sqrt()).abs() < 1e-12);
        assert!((grad_norm(&g, None) - 1.0).abs() < 1e-12);
    }
}
