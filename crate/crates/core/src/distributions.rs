//! Diagonal Gaussians and the Itakura-Saito (exponential / Gamma shape 1)
//! likelihood for power spectra.
//!
//! Two flavours of every routine are provided: plain functions over
//! [`GaussianParams`] values and graph versions over [`GaussianVar`] that
//! operate row-wise on a `B×D` batch and are differentiable.

use std::f64::consts::PI;

use crate::error::{check_dim, DvaeError, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bounds applied to every log-variance before exponentiation.
pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 20.0;

/// Mean and log-variance of a diagonal Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams<T> {
    pub mean: Vec<T>,
    pub log_var: Vec<T>,
}

impl<T: Scalar> GaussianParams<T> {
    pub fn new(mean: Vec<T>, log_var: Vec<T>) -> Result<Self> {
        check_dim("gaussian params: log_var length", mean.len(), log_var.len())?;
        if let Some(v) = log_var.iter().find(|v| !v.exp().is_finite() || !v.is_finite()) {
            return Err(DvaeError::Domain(format!("log_var {v} gives a non-finite variance")));
        }
        Ok(Self { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![T::zero(); dim],
            log_var: vec![T::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<T> {
        self.log_var.iter().map(|v| clamp_log_var(*v).exp()).collect()
    }
}

/// Log-variances of the Itakura-Saito observation model, one per frequency bin.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerSpecVarianceParams<T> {
    pub log_var: Vec<T>,
}

#[inline]
pub fn clamp_log_var<T: Scalar>(v: T) -> T {
    v.max(T::lit(LOG_VAR_MIN)).min(T::lit(LOG_VAR_MAX))
}

/// Sum over dimensions of the diagonal-Gaussian log-density.
pub fn gaussian_log_prob<T: Scalar>(x: &[T], p: &GaussianParams<T>) -> Result<T> {
    check_dim("gaussian_log_prob: x", p.dim(), x.len())?;
    check_dim("gaussian_log_prob: log_var", p.dim(), p.log_var.len())?;
    let ln2pi = T::lit((2.0 * PI).ln());
    let half = T::lit(0.5);
    Ok(x
        .iter()
        .zip(&p.mean)
        .zip(&p.log_var)
        .map(|((&xi, &m), &lv)| {
            let lv = clamp_log_var(lv);
            let d = xi - m;
            -half * (ln2pi + lv + d * d * (-lv).exp())
        })
        .sum())
}

/// Closed-form `KL(q‖p)` between diagonal Gaussians, summed over dimensions.
pub fn kl_diag_gaussians<T: Scalar>(q: &GaussianParams<T>, p: &GaussianParams<T>) -> Result<T> {
    check_dim("kl_diag_gaussians", q.dim(), p.dim())?;
    let half = T::lit(0.5);
    Ok((0..q.dim())
        .map(|i| {
            let lq = clamp_log_var(q.log_var[i]);
            let lp = clamp_log_var(p.log_var[i]);
            let d = q.mean[i] - p.mean[i];
            half * (lp - lq + (lq.exp() + d * d) * (-lp).exp() - T::one())
        })
        .sum())
}

/// `mean + noise ⊙ exp(log_var / 2)`.
pub fn reparam_sample<T: Scalar>(p: &GaussianParams<T>, noise: &[T]) -> Result<Vec<T>> {
    check_dim("reparam_sample: noise", p.dim(), noise.len())?;
    let half = T::lit(0.5);
    Ok(p.mean
        .iter()
        .zip(&p.log_var)
        .zip(noise)
        .map(|((&m, &lv), &e)| m + e * (clamp_log_var(lv) * half).exp())
        .collect())
}

/// `Σ_f [−ln σ²_f − x_f / σ²_f]`: the Gamma(1, 1/σ²) log-density with its
/// additive constant fixed to zero.
pub fn itakura_saito_log_prob<T: Scalar>(x: &[T], v: &PowerSpecVarianceParams<T>) -> Result<T> {
    check_dim("itakura_saito_log_prob", v.log_var.len(), x.len())?;
    if let Some(bad) = x.iter().find(|&&xi| !(xi >= T::zero())) {
        return Err(DvaeError::Domain(format!(
            "power spectrum entries must be nonnegative, found {bad}"
        )));
    }
    Ok(x.iter()
        .zip(&v.log_var)
        .map(|(&xi, &lv)| {
            let lv = clamp_log_var(lv);
            -lv - xi * (-lv).exp()
        })
        .sum())
}

/// Diagonal Gaussian living in a [`Graph`]: both fields are `B×D` nodes.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVar {
    pub mean: Var,
    pub log_var: Var,
}

impl GaussianVar {
    pub fn values<T: Scalar>(&self, g: &Graph<T>, row: usize) -> GaussianParams<T> {
        GaussianParams {
            mean: g.value(self.mean).row(row).to_vec(),
            log_var: g.value(self.log_var).row(row).to_vec(),
        }
    }
}

/// Standard-normal parameters broadcast to `rows × dim`.
pub fn standard_normal_var<T: Scalar>(g: &mut Graph<T>, rows: usize, dim: usize) -> GaussianVar {
    let mean = g.zeros(rows, dim);
    let log_var = g.zeros(rows, dim);
    GaussianVar { mean, log_var }
}

/// Row-wise Gaussian log-density: `B×D` → `B×1`.
pub fn graph_gaussian_log_prob<T: Scalar>(g: &mut Graph<T>, x: Var, p: GaussianVar) -> Var {
    let d = g.sub(x, p.mean);
    let d2 = g.square(d);
    let neg_lv = g.neg(p.log_var);
    let prec = g.exp(neg_lv);
    let quad = g.mul(d2, prec);
    let s = g.add(quad, p.log_var);
    let s = g.offset(s, T::lit((2.0 * PI).ln()));
    let row = g.sum_cols(s);
    g.scale(row, T::lit(-0.5))
}

/// Row-wise closed-form `KL(q‖p)`: `B×D` → `B×1`.
pub fn graph_kl<T: Scalar>(g: &mut Graph<T>, q: GaussianVar, p: GaussianVar) -> Var {
    let d = g.sub(q.mean, p.mean);
    let d2 = g.square(d);
    let vq = g.exp(q.log_var);
    let num = g.add(vq, d2);
    let neg_lp = g.neg(p.log_var);
    let inv_vp = g.exp(neg_lp);
    let ratio = g.mul(num, inv_vp);
    let lv_diff = g.sub(p.log_var, q.log_var);
    let s = g.add(ratio, lv_diff);
    let s = g.offset(s, -T::one());
    let row = g.sum_cols(s);
    g.scale(row, T::lit(0.5))
}

/// Row-wise `KL(q‖N(0, I))`: `B×D` → `B×1`.
pub fn graph_kl_standard<T: Scalar>(g: &mut Graph<T>, q: GaussianVar) -> Var {
    let m2 = g.square(q.mean);
    let vq = g.exp(q.log_var);
    let s = g.add(m2, vq);
    let s = g.sub(s, q.log_var);
    let s = g.offset(s, -T::one());
    let row = g.sum_cols(s);
    g.scale(row, T::lit(0.5))
}

/// Reparameterized draw `mean + noise ⊙ exp(log_var / 2)`.
pub fn graph_reparam<T: Scalar>(g: &mut Graph<T>, p: GaussianVar, noise: Tensor<T>) -> Var {
    let half = g.scale(p.log_var, T::lit(0.5));
    let std = g.exp(half);
    let e = g.input(noise);
    let scaled = g.mul(std, e);
    g.add(p.mean, scaled)
}

/// Row-wise Itakura-Saito log-likelihood of power spectra `x` given
/// log-variances: `B×F` → `B×1`.
pub fn graph_is_log_prob<T: Scalar>(g: &mut Graph<T>, x: Var, log_var: Var) -> Var {
    let neg_lv = g.neg(log_var);
    let inv = g.exp(neg_lv);
    let ratio = g.mul(x, inv);
    let s = g.add(ratio, log_var);
    let row = g.sum_cols(s);
    g.neg(row)
}
