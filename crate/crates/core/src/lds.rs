//! Exact inference for linear-Gaussian state-space models:
//!
//! ```text
//! z_1 ~ N(init.mean, init.cov)
//! z_t = A_t z_{t-1} + B_t u_t + m_t + w_t,   w_t ~ N(0, Λ)     (t ≥ 2)
//! a_t = C_t z_t + n_t + v_t,                 v_t ~ N(0, Σ)
//! ```
//!
//! Kalman filter (Joseph-form update), Rauch-Tung-Striebel smoother with
//! lag-one cross-covariances, exact prediction-error log-marginal, ancestral
//! and forward-filter/backward-sample draws, and convex mixing of a bank of
//! parameter sets.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, DvaeError, Result};
use crate::linalg::{add, cholesky, cholesky_solve, diag, sandwich, spd_logdet, sub, symmetrize};
use crate::params::gaussian;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Tolerance on the mixing-weight simplex constraint.
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct LdsParams<T> {
    /// `A`, `L_z × L_z`.
    pub transition: Tensor<T>,
    /// `B`, `L_z × U` (U may be 0).
    pub input: Tensor<T>,
    /// `C`, `L_a × L_z`.
    pub emission: Tensor<T>,
    /// `Λ`, `L_z × L_z`.
    pub state_noise: Tensor<T>,
    /// `Σ`, `L_a × L_a`.
    pub emission_noise: Tensor<T>,
    pub state_bias: Vec<T>,
    pub emission_bias: Vec<T>,
}

impl<T: Scalar> LdsParams<T> {
    /// Zero biases, no input, diagonal noise covariances.
    pub fn new(transition: Tensor<T>, emission: Tensor<T>, state_var: &[T], emission_var: &[T]) -> Result<Self> {
        let lz = transition.rows();
        let la = emission.rows();
        let p = Self {
            input: Tensor::zeros(lz, 0),
            state_noise: diag(state_var),
            emission_noise: diag(emission_var),
            state_bias: vec![T::zero(); lz],
            emission_bias: vec![T::zero(); la],
            transition,
            emission,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn state_dim(&self) -> usize {
        self.transition.rows()
    }

    pub fn obs_dim(&self) -> usize {
        self.emission.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.input.cols()
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_shapes()?;
        cholesky(&self.state_noise).map_err(|_| DvaeError::Domain("state noise covariance is not positive definite".into()))?;
        cholesky(&self.emission_noise)
            .map_err(|_| DvaeError::Domain("emission noise covariance is not positive definite".into()))?;
        Ok(())
    }

    /// Dimension agreement only; covariances may be singular.
    pub fn validate_shapes(&self) -> Result<()> {
        let lz = self.state_dim();
        let la = self.obs_dim();
        check_dim("transition columns", lz, self.transition.cols())?;
        check_dim("input matrix rows", lz, self.input.rows())?;
        check_dim("emission columns", lz, self.emission.cols())?;
        check_dim("state noise rows", lz, self.state_noise.rows())?;
        check_dim("state noise columns", lz, self.state_noise.cols())?;
        check_dim("emission noise rows", la, self.emission_noise.rows())?;
        check_dim("emission noise columns", la, self.emission_noise.cols())?;
        check_dim("state bias", lz, self.state_bias.len())?;
        check_dim("emission bias", la, self.emission_bias.len())?;
        Ok(())
    }
}

/// Prior over the first state.
#[derive(Clone, Debug, PartialEq)]
pub struct LdsInit<T> {
    pub mean: Vec<T>,
    pub cov: Tensor<T>,
}

impl<T: Scalar> LdsInit<T> {
    /// `N(0, Λ)`: the first state is a noise draw around the origin.
    pub fn from_state_noise(params: &LdsParams<T>) -> Self {
        Self {
            mean: vec![T::zero(); params.state_dim()],
            cov: params.state_noise.clone(),
        }
    }
}

/// Either one parameter set for all steps or one per step.
#[derive(Clone, Copy, Debug)]
pub enum Schedule<'a, T> {
    Shared(&'a LdsParams<T>),
    PerStep(&'a [LdsParams<T>]),
}

impl<'a, T: Scalar> Schedule<'a, T> {
    pub fn at(&self, t: usize) -> &'a LdsParams<T> {
        match self {
            Schedule::Shared(p) => p,
            Schedule::PerStep(ps) => &ps[t],
        }
    }

    fn check(&self, len: usize) -> Result<()> {
        match self {
            Schedule::Shared(p) => p.validate(),
            Schedule::PerStep(ps) => {
                check_dim("per-step parameter count", len, ps.len())?;
                let first = ps.first().map(|p| (p.state_dim(), p.obs_dim(), p.input_dim()));
                for p in ps.iter() {
                    p.validate()?;
                    if Some((p.state_dim(), p.obs_dim(), p.input_dim())) != first {
                        return Err(DvaeError::Contract("per-step parameters disagree on dimensions".into()));
                    }
                }
                Ok(())
            }
        }
    }
}

impl<'a, T> From<&'a LdsParams<T>> for Schedule<'a, T> {
    fn from(p: &'a LdsParams<T>) -> Self {
        Schedule::Shared(p)
    }
}

impl<'a, T> From<&'a [LdsParams<T>]> for Schedule<'a, T> {
    fn from(p: &'a [LdsParams<T>]) -> Self {
        Schedule::PerStep(p)
    }
}

#[derive(Clone, Debug)]
pub struct FilterStep<T> {
    pub pred_mean: Vec<T>,
    pub pred_cov: Tensor<T>,
    pub mean: Vec<T>,
    pub cov: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct FilterOutput<T> {
    pub steps: Vec<FilterStep<T>>,
    /// `log p(a_{1:T} | u_{1:T})` by prediction-error decomposition.
    pub log_marginal: T,
}

#[derive(Clone, Debug)]
pub struct SmoothStep<T> {
    pub mean: Vec<T>,
    pub cov: Tensor<T>,
    /// `Cov(z_{t+1}, z_t | a_{1:T})`; `None` at the last step.
    pub cross_cov_next: Option<Tensor<T>>,
}

fn col<T: Scalar>(v: &[T]) -> Tensor<T> {
    Tensor::from_fn(v.len(), 1, |r, _| v[r])
}

fn matvec<T: Scalar>(m: &Tensor<T>, v: &[T]) -> Vec<T> {
    if m.cols() == 0 {
        return vec![T::zero(); m.rows()];
    }
    m.matmul(&col(v)).into_vec()
}

fn vadd<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

fn vsub<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

fn check_inputs<T: Scalar>(
    sched: &Schedule<'_, T>,
    init: &LdsInit<T>,
    obs: &[Vec<T>],
    inputs: Option<&[Vec<T>]>,
) -> Result<()> {
    if obs.is_empty() {
        return Err(DvaeError::EmptyInput("observation sequence".into()));
    }
    sched.check(obs.len())?;
    let p0 = sched.at(0);
    check_dim("initial mean", p0.state_dim(), init.mean.len())?;
    check_dim("initial covariance rows", p0.state_dim(), init.cov.rows())?;
    check_dim("initial covariance columns", p0.state_dim(), init.cov.cols())?;
    for a in obs {
        check_dim("observation", p0.obs_dim(), a.len())?;
    }
    match inputs {
        Some(u) => {
            check_dim("input sequence length", obs.len(), u.len())?;
            for ut in u {
                check_dim("input", p0.input_dim(), ut.len())?;
            }
        }
        None => {
            if p0.input_dim() != 0 {
                return Err(DvaeError::Contract("input matrix present but no inputs supplied".into()));
            }
        }
    }
    Ok(())
}

/// Prior moments of `z_t` given the previous filtered moments.
fn predict<T: Scalar>(
    p: &LdsParams<T>,
    prev_mean: &[T],
    prev_cov: &Tensor<T>,
    u: Option<&[T]>,
) -> (Vec<T>, Tensor<T>) {
    let mut m = vadd(&matvec(&p.transition, prev_mean), &p.state_bias);
    if let Some(u) = u {
        m = vadd(&m, &matvec(&p.input, u));
    }
    let mut c = add(&sandwich(&p.transition, prev_cov), &p.state_noise);
    symmetrize(&mut c);
    (m, c)
}

pub fn kalman_filter<'a, T: Scalar>(
    sched: impl Into<Schedule<'a, T>>,
    init: &LdsInit<T>,
    obs: &[Vec<T>],
    inputs: Option<&[Vec<T>]>,
) -> Result<FilterOutput<T>> {
    let sched = sched.into();
    check_inputs(&sched, init, obs, inputs)?;
    let lz = sched.at(0).state_dim();
    let two_pi_ln = T::lit((2.0 * std::f64::consts::PI).ln());
    let mut steps: Vec<FilterStep<T>> = Vec::with_capacity(obs.len());
    let mut log_marginal = T::zero();
    for (t, a) in obs.iter().enumerate() {
        let p = sched.at(t);
        let (pred_mean, pred_cov) = match steps.last() {
            None => (init.mean.clone(), init.cov.clone()),
            Some(prev) => predict(p, &prev.mean, &prev.cov, inputs.map(|u| u[t].as_slice())),
        };
        let c = &p.emission;
        let mut s = add(&sandwich(c, &pred_cov), &p.emission_noise);
        symmetrize(&mut s);
        let chol = cholesky(&s).map_err(|e| {
            DvaeError::Numerical(format!("innovation covariance at step {} not positive definite: {e}", t + 1))
        })?;
        let innov = vsub(a, &vadd(&matvec(c, &pred_mean), &p.emission_bias));
        // K = P⁻ Cᵀ S⁻¹
        let pct = pred_cov.matmul(&c.transpose());
        let gain = cholesky_solve(&chol, &pct.transpose()).transpose();
        let mean = vadd(&pred_mean, &matvec(&gain, &innov));
        let i_kc = sub(&Tensor::identity(lz), &gain.matmul(c));
        let mut cov = add(&sandwich(&i_kc, &pred_cov), &sandwich(&gain, &p.emission_noise));
        symmetrize(&mut cov);

        let sol = cholesky_solve(&chol, &col(&innov)).into_vec();
        let quad: T = innov.iter().zip(&sol).map(|(&x, &y)| x * y).sum();
        let logdet = (0..chol.rows()).map(|i| chol[(i, i)].ln()).sum::<T>() * T::lit(2.0);
        log_marginal -= T::lit(0.5) * (T::lit(a.len() as f64) * two_pi_ln + logdet + quad);

        steps.push(FilterStep {
            pred_mean,
            pred_cov,
            mean,
            cov,
        });
    }
    Ok(FilterOutput { steps, log_marginal })
}

/// Smoother gain `J_t = P_t A_{t+1}ᵀ (P⁻_{t+1})⁻¹`.
fn smoother_gain<T: Scalar>(cur: &FilterStep<T>, next: &FilterStep<T>, next_params: &LdsParams<T>) -> Result<Tensor<T>> {
    let l = cholesky(&next.pred_cov)?;
    let pat = cur.cov.matmul(&next_params.transition.transpose());
    Ok(cholesky_solve(&l, &pat.transpose()).transpose())
}

pub fn kalman_smooth<'a, T: Scalar>(
    sched: impl Into<Schedule<'a, T>>,
    init: &LdsInit<T>,
    obs: &[Vec<T>],
    inputs: Option<&[Vec<T>]>,
) -> Result<Vec<SmoothStep<T>>> {
    let sched = sched.into();
    let filt = kalman_filter(sched, init, obs, inputs)?;
    let n = filt.steps.len();
    let last = &filt.steps[n - 1];
    let mut out = vec![SmoothStep {
        mean: last.mean.clone(),
        cov: last.cov.clone(),
        cross_cov_next: None,
    }];
    for t in (0..n - 1).rev() {
        let cur = &filt.steps[t];
        let next = &filt.steps[t + 1];
        let gain = smoother_gain(cur, next, sched.at(t + 1))?;
        let after = out.last().expect("smoother seeded with last step");
        let mean = vadd(&cur.mean, &matvec(&gain, &vsub(&after.mean, &next.pred_mean)));
        let mut cov = add(&cur.cov, &sandwich(&gain, &sub(&after.cov, &next.pred_cov)));
        symmetrize(&mut cov);
        let cross = after.cov.matmul(&gain.transpose());
        out.push(SmoothStep {
            mean,
            cov,
            cross_cov_next: Some(cross),
        });
    }
    out.reverse();
    Ok(out)
}

pub fn lds_log_marginal<'a, T: Scalar>(
    sched: impl Into<Schedule<'a, T>>,
    init: &LdsInit<T>,
    obs: &[Vec<T>],
    inputs: Option<&[Vec<T>]>,
) -> Result<T> {
    Ok(kalman_filter(sched, init, obs, inputs)?.log_marginal)
}

/// Full-covariance Gaussian log-density.
pub fn mvn_log_prob<T: Scalar>(x: &[T], mean: &[T], cov: &Tensor<T>) -> Result<T> {
    check_dim("mvn sample", mean.len(), x.len())?;
    let l = cholesky(cov)?;
    let d = vsub(x, mean);
    let sol = cholesky_solve(&l, &col(&d)).into_vec();
    let quad: T = d.iter().zip(&sol).map(|(&a, &b)| a * b).sum();
    let logdet = spd_logdet(cov)?;
    let ln2pi = T::lit((2.0 * std::f64::consts::PI).ln());
    Ok(-T::lit(0.5) * (T::lit(x.len() as f64) * ln2pi + logdet + quad))
}

fn mvn_draw<T: Scalar, R: Rng + ?Sized>(rng: &mut R, mean: &[T], cov: &Tensor<T>) -> Result<Vec<T>> {
    let l = cholesky(cov)?;
    let eps: Vec<T> = (0..mean.len())
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            T::lit(e)
        })
        .collect();
    Ok(vadd(mean, &matvec(&l, &eps)))
}

/// Ancestral draw of `(z_{1:T}, a_{1:T})`.
pub fn sample_lds<'a, T: Scalar, R: Rng + ?Sized>(
    sched: impl Into<Schedule<'a, T>>,
    init: &LdsInit<T>,
    len: usize,
    inputs: Option<&[Vec<T>]>,
    rng: &mut R,
) -> Result<(Vec<Vec<T>>, Vec<Vec<T>>)> {
    let sched = sched.into();
    sched.check(len)?;
    let mut zs: Vec<Vec<T>> = Vec::with_capacity(len);
    let mut obs = Vec::with_capacity(len);
    for t in 0..len {
        let p = sched.at(t);
        let z = match zs.last() {
            None => mvn_draw(rng, &init.mean, &init.cov)?,
            Some(prev) => {
                let mut m = vadd(&matvec(&p.transition, prev), &p.state_bias);
                if let Some(u) = inputs {
                    m = vadd(&m, &matvec(&p.input, &u[t]));
                }
                mvn_draw(rng, &m, &p.state_noise)?
            }
        };
        let am = vadd(&matvec(&p.emission, &z), &p.emission_bias);
        obs.push(mvn_draw(rng, &am, &p.emission_noise)?);
        zs.push(z);
    }
    Ok((zs, obs))
}

/// `log p(z_{1:T}) + log p(a_{1:T} | z_{1:T})`.
pub fn lds_log_joint<'a, T: Scalar>(
    sched: impl Into<Schedule<'a, T>>,
    init: &LdsInit<T>,
    states: &[Vec<T>],
    obs: &[Vec<T>],
    inputs: Option<&[Vec<T>]>,
) -> Result<T> {
    let sched = sched.into();
    check_inputs(&sched, init, obs, inputs)?;
    check_dim("state sequence length", obs.len(), states.len())?;
    let mut total = T::zero();
    for t in 0..obs.len() {
        let p = sched.at(t);
        total += if t == 0 {
            mvn_log_prob(&states[0], &init.mean, &init.cov)?
        } else {
            let mut m = vadd(&matvec(&p.transition, &states[t - 1]), &p.state_bias);
            if let Some(u) = inputs {
                m = vadd(&m, &matvec(&p.input, &u[t]));
            }
            mvn_log_prob(&states[t], &m, &p.state_noise)?
        };
        let am = vadd(&matvec(&p.emission, &states[t]), &p.emission_bias);
        total += mvn_log_prob(&obs[t], &am, &p.emission_noise)?;
    }
    Ok(total)
}

/// Exact posterior draw `z_{1:T} ~ p(z_{1:T} | a_{1:T})` by forward filtering
/// and backward sampling; returns the trajectory and its posterior
/// log-density.
pub fn sample_posterior<'a, T: Scalar, R: Rng + ?Sized>(
    sched: impl Into<Schedule<'a, T>>,
    init: &LdsInit<T>,
    obs: &[Vec<T>],
    inputs: Option<&[Vec<T>]>,
    rng: &mut R,
) -> Result<(Vec<Vec<T>>, T)> {
    let sched = sched.into();
    let filt = kalman_filter(sched, init, obs, inputs)?;
    let n = filt.steps.len();
    let mut zs = vec![Vec::new(); n];
    let last = &filt.steps[n - 1];
    zs[n - 1] = mvn_draw(rng, &last.mean, &last.cov)?;
    let mut log_q = mvn_log_prob(&zs[n - 1], &last.mean, &last.cov)?;
    for t in (0..n - 1).rev() {
        let (m, c) = backward_conditional(&filt.steps[t], &filt.steps[t + 1], sched.at(t + 1), &zs[t + 1])?;
        zs[t] = mvn_draw(rng, &m, &c)?;
        log_q += mvn_log_prob(&zs[t], &m, &c)?;
    }
    Ok((zs, log_q))
}

/// Log-density of a given trajectory under `p(z_{1:T} | a_{1:T})`.
pub fn posterior_log_prob<'a, T: Scalar>(
    sched: impl Into<Schedule<'a, T>>,
    init: &LdsInit<T>,
    obs: &[Vec<T>],
    inputs: Option<&[Vec<T>]>,
    states: &[Vec<T>],
) -> Result<T> {
    let sched = sched.into();
    let filt = kalman_filter(sched, init, obs, inputs)?;
    let n = filt.steps.len();
    check_dim("state sequence length", n, states.len())?;
    let last = &filt.steps[n - 1];
    let mut log_q = mvn_log_prob(&states[n - 1], &last.mean, &last.cov)?;
    for t in (0..n - 1).rev() {
        let (m, c) = backward_conditional(&filt.steps[t], &filt.steps[t + 1], sched.at(t + 1), &states[t + 1])?;
        log_q += mvn_log_prob(&states[t], &m, &c)?;
    }
    Ok(log_q)
}

/// `p(z_t | z_{t+1}, a_{1:t})`.
fn backward_conditional<T: Scalar>(
    cur: &FilterStep<T>,
    next: &FilterStep<T>,
    next_params: &LdsParams<T>,
    z_next: &[T],
) -> Result<(Vec<T>, Tensor<T>)> {
    let gain = smoother_gain(cur, next, next_params)?;
    let mean = vadd(&cur.mean, &matvec(&gain, &vsub(z_next, &next.pred_mean)));
    let mut cov = sub(&cur.cov, &gain.matmul(&next.pred_cov).matmul(&gain.transpose()));
    symmetrize(&mut cov);
    Ok((mean, cov))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BankShape {
    pub components: usize,
    pub state_dim: usize,
    pub obs_dim: usize,
    pub input_dim: usize,
}

/// Bank of `K` parameter sets sharing noise covariances.
#[derive(Clone, Debug, PartialEq)]
pub struct LdsBank<T> {
    pub transitions: Vec<Tensor<T>>,
    pub inputs: Vec<Tensor<T>>,
    pub emissions: Vec<Tensor<T>>,
    pub state_noise: Tensor<T>,
    pub emission_noise: Tensor<T>,
}

impl<T: Scalar> LdsBank<T> {
    /// Identity transitions, Gaussian input/emission matrices with standard
    /// deviation `scale`, isotropic noises.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, shape: BankShape, scale: f64, state_var: f64, emission_var: f64) -> Self {
        let BankShape {
            components,
            state_dim,
            obs_dim,
            input_dim,
        } = shape;
        Self {
            transitions: (0..components).map(|_| Tensor::identity(state_dim)).collect(),
            inputs: (0..components).map(|_| gaussian(rng, state_dim, input_dim, scale)).collect(),
            emissions: (0..components).map(|_| gaussian(rng, obs_dim, state_dim, scale)).collect(),
            state_noise: diag(&vec![T::lit(state_var); state_dim]),
            emission_noise: diag(&vec![T::lit(emission_var); obs_dim]),
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// Convex combination of the bank components with weights `alpha`.
pub fn mix_bank<T: Scalar>(bank: &LdsBank<T>, alpha: &[T]) -> Result<LdsParams<T>> {
    let k = bank.len();
    if k == 0 {
        return Err(DvaeError::EmptyInput("parameter bank".into()));
    }
    check_dim("mixing weights", k, alpha.len())?;
    check_dim("bank input matrices", k, bank.inputs.len())?;
    check_dim("bank emission matrices", k, bank.emissions.len())?;
    let tol = SIMPLEX_TOL;
    let total: f64 = alpha.iter().map(|a| a.as_f64()).sum();
    if alpha.iter().any(|a| !(a.as_f64() >= -tol)) || (total - 1.0).abs() > tol {
        return Err(DvaeError::Domain(format!("mixing weights are off the simplex (sum {total})")));
    }
    let combine = |ms: &[Tensor<T>]| -> Result<Tensor<T>> {
        let shape = ms[0].shape();
        let mut out = Tensor::zeros(shape.0, shape.1);
        for (m, &a) in ms.iter().zip(alpha) {
            if m.shape() != shape {
                return Err(DvaeError::Contract("bank components disagree on dimensions".into()));
            }
            for (o, &v) in out.as_mut_slice().iter_mut().zip(m.as_slice()) {
                *o += a * v;
            }
        }
        Ok(out)
    };
    let p = LdsParams {
        transition: combine(&bank.transitions)?,
        input: combine(&bank.inputs)?,
        emission: combine(&bank.emissions)?,
        state_noise: bank.state_noise.clone(),
        emission_noise: bank.emission_noise.clone(),
        state_bias: vec![T::zero(); bank.state_noise.rows()],
        emission_bias: vec![T::zero(); bank.emission_noise.rows()],
    };
    p.validate()?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_system(a: f64, c: f64, q: f64, r: f64) -> LdsParams<f64> {
        LdsParams::new(
            Tensor::from_f64(1, 1, &[a]).unwrap(),
            Tensor::from_f64(1, 1, &[c]).unwrap(),
            &[q],
            &[r],
        )
        .unwrap()
    }

    #[test]
    fn pure_observation_tracks_data() {
        let p = scalar_system(0.0, 1.0, 1.0, 1e-12);
        let init = LdsInit::from_state_noise(&p);
        let obs = vec![vec![0.3], vec![-1.2], vec![2.5]];
        let f = kalman_filter(&p, &init, &obs, None).unwrap();
        for (s, a) in f.steps.iter().zip(&obs) {
            assert!((s.mean[0] - a[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_emission_is_prior_propagation() {
        let p = scalar_system(0.9, 0.0, 0.5, 1.0);
        let init = LdsInit {
            mean: vec![1.0],
            cov: Tensor::from_f64(1, 1, &[2.0]).unwrap(),
        };
        let f = kalman_filter(&p, &init, &[vec![5.0], vec![-5.0]], None).unwrap();
        assert!((f.steps[0].mean[0] - 1.0).abs() < 1e-15);
        assert!((f.steps[1].mean[0] - 0.9).abs() < 1e-15);
        assert!((f.steps[1].cov[(0, 0)] - (0.81 * 2.0 + 0.5)).abs() < 1e-14);
    }

    #[test]
    fn single_step_marginal_is_emission_density() {
        let p = scalar_system(123.0, 2.0, 0.5, 0.3);
        let init = LdsInit::from_state_noise(&p);
        let lm = lds_log_marginal(&p, &init, &[vec![0.7]], None).unwrap();
        let var = 4.0 * 0.5 + 0.3;
        let expect = -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + 0.49 / var);
        assert!((lm - expect).abs() < 1e-14);
    }

    #[test]
    fn single_step_smoothing_equals_filtering() {
        let p = scalar_system(0.5, 1.0, 0.5, 0.3);
        let init = LdsInit::from_state_noise(&p);
        let f = kalman_filter(&p, &init, &[vec![0.7]], None).unwrap();
        let s = kalman_smooth(&p, &init, &[vec![0.7]], None).unwrap();
        assert_eq!(s[0].mean, f.steps[0].mean);
        assert_eq!(s[0].cov, f.steps[0].cov);
    }

    #[test]
    fn mixing_examples() {
        let a0 = Tensor::from_f64(1, 2, &[1.0, 2.0]).unwrap();
        let a1 = Tensor::from_f64(1, 2, &[3.0, 6.0]).unwrap();
        let bank = LdsBank::<f64> {
            transitions: vec![Tensor::identity(2), Tensor::from_f64(2, 2, &[0.0, 1.0, 1.0, 0.0]).unwrap()],
            inputs: vec![Tensor::zeros(2, 0), Tensor::zeros(2, 0)],
            emissions: vec![a0.clone(), a1],
            state_noise: Tensor::identity(2),
            emission_noise: Tensor::identity(1),
        };
        let one_hot = mix_bank(&bank, &[1.0, 0.0]).unwrap();
        assert_eq!(one_hot.emission, a0);
        let avg = mix_bank(&bank, &[0.5, 0.5]).unwrap();
        assert_eq!(avg.emission.as_slice(), &[2.0, 4.0]);
        assert_eq!(avg.transition.as_slice(), &[0.5, 0.5, 0.5, 0.5]);
        assert!(matches!(mix_bank(&bank, &[0.6, 0.5]), Err(DvaeError::Domain(_))));
        assert!(matches!(mix_bank(&bank, &[1.1, -0.1]), Err(DvaeError::Domain(_))));
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let p = scalar_system(0.5, 1.0, 0.5, 0.3);
        let init = LdsInit::from_state_noise(&p);
        assert!(matches!(kalman_filter(&p, &init, &[], None), Err(DvaeError::EmptyInput(_))));
    }
}
