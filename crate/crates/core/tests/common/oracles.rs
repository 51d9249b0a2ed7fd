//! Independent reference computations built on dense linear algebra.

use dvae::lds::{kalman_filter, kalman_smooth, LdsInit, LdsParams, Schedule};
use dvae::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn to_na(t: &Tensor<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(t.rows(), t.cols(), |r, c| t[(r, c)])
}

pub fn from_na(m: &DMatrix<f64>) -> Tensor<f64> {
    Tensor::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
}

/// Mean and covariance of the stacked vector `(z_1..z_T, a_1..a_T)` of a
/// linear-Gaussian state-space model with per-step parameters (no inputs).
pub struct JointGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub lz: usize,
    pub la: usize,
    pub len: usize,
}

impl JointGaussian {
    pub fn new(params: &[LdsParams<f64>], init: &LdsInit<f64>) -> Self {
        let len = params.len();
        let lz = params[0].state_dim();
        let la = params[0].obs_dim();
        // z_t = mean_t + Σ_{k ≤ t} Φ(t, k) w_k with w_1 ~ N(0, P0), w_k ~ N(0, Λ_k).
        let mut z_mean: Vec<DVector<f64>> = Vec::with_capacity(len);
        for t in 0..len {
            let m = if t == 0 {
                DVector::from_column_slice(&init.mean)
            } else {
                to_na(&params[t].transition) * &z_mean[t - 1] + DVector::from_column_slice(&params[t].state_bias)
            };
            z_mean.push(m);
        }
        // phi[t][k] = A_t A_{t-1} ... A_{k+1}
        let mut phi = vec![vec![DMatrix::<f64>::zeros(lz, lz); len]; len];
        for k in 0..len {
            phi[k][k] = DMatrix::identity(lz, lz);
            for t in k + 1..len {
                phi[t][k] = to_na(&params[t].transition) * &phi[t - 1][k];
            }
        }
        let noise_cov = |k: usize| if k == 0 { to_na(&init.cov) } else { to_na(&params[k].state_noise) };
        let n = len * (lz + la);
        let mut cov = DMatrix::<f64>::zeros(n, n);
        let zoff = |t: usize| t * lz;
        let aoff = |t: usize| len * lz + t * la;
        let mut zz = vec![vec![DMatrix::<f64>::zeros(lz, lz); len]; len];
        for t in 0..len {
            for s in 0..len {
                let mut c = DMatrix::<f64>::zeros(lz, lz);
                for k in 0..=t.min(s) {
                    c += &phi[t][k] * noise_cov(k) * phi[s][k].transpose();
                }
                zz[t][s] = c;
            }
        }
        for t in 0..len {
            let ct = to_na(&params[t].emission);
            for s in 0..len {
                let cs = to_na(&params[s].emission);
                cov.view_mut((zoff(t), zoff(s)), (lz, lz)).copy_from(&zz[t][s]);
                let az = &ct * &zz[t][s];
                cov.view_mut((aoff(t), zoff(s)), (la, lz)).copy_from(&az);
                cov.view_mut((zoff(s), aoff(t)), (lz, la)).copy_from(&az.transpose());
                let mut aa = &ct * &zz[t][s] * cs.transpose();
                if t == s {
                    aa += to_na(&params[t].emission_noise);
                }
                cov.view_mut((aoff(t), aoff(s)), (la, la)).copy_from(&aa);
            }
        }
        let mut mean = DVector::<f64>::zeros(n);
        for t in 0..len {
            mean.rows_mut(zoff(t), lz).copy_from(&z_mean[t]);
            let am = to_na(&params[t].emission) * &z_mean[t] + DVector::from_column_slice(&params[t].emission_bias);
            mean.rows_mut(aoff(t), la).copy_from(&am);
        }
        Self { mean, cov, lz, la, len }
    }

    fn z_idx(&self, t: usize) -> Vec<usize> {
        (t * self.lz..(t + 1) * self.lz).collect()
    }

    fn a_idx(&self, upto: usize) -> Vec<usize> {
        (self.len * self.lz..self.len * self.lz + upto * self.la).collect()
    }

    fn block(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |r, c| self.cov[(rows[r], cols[c])])
    }

    /// Mean and covariance of the `target` coordinates given the first
    /// `upto` observations.
    fn condition(&self, target: &[usize], upto: usize, obs: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
        let a = self.a_idx(upto);
        let saa = self.block(&a, &a);
        let sta = self.block(target, &a);
        let stt = self.block(target, target);
        let resid = DVector::from_iterator(
            a.len(),
            obs[..upto].iter().flatten().zip(&a).map(|(x, &i)| x - self.mean[i]),
        );
        let inv = saa.try_inverse().expect("observation covariance is invertible");
        let mt = DVector::from_iterator(target.len(), target.iter().map(|&i| self.mean[i]));
        (mt + &sta * &inv * resid, stt - &sta * &inv * sta.transpose())
    }

    /// `p(z_t | a_{1:t})`.
    pub fn filtered(&self, t: usize, obs: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
        self.condition(&self.z_idx(t), t + 1, obs)
    }

    /// `p(z_t | a_{1:T})`.
    pub fn smoothed(&self, t: usize, obs: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
        self.condition(&self.z_idx(t), self.len, obs)
    }

    /// `Cov(z_{t+1}, z_t | a_{1:T})`.
    pub fn smoothed_cross(&self, t: usize, obs: &[Vec<f64>]) -> DMatrix<f64> {
        let mut both = self.z_idx(t + 1);
        both.extend(self.z_idx(t));
        let (_, c) = self.condition(&both, self.len, obs);
        c.view((0, self.lz), (self.lz, self.lz)).into_owned()
    }

    /// `log p(a_{1:T})`.
    pub fn log_marginal(&self, obs: &[Vec<f64>]) -> f64 {
        let a = self.a_idx(self.len);
        let saa = self.block(&a, &a);
        let resid = DVector::from_iterator(
            a.len(),
            obs.iter().flatten().zip(&a).map(|(x, &i)| x - self.mean[i]),
        );
        let chol = saa.clone().cholesky().expect("observation covariance is positive definite");
        let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let quad = resid.dot(&chol.solve(&resid));
        -0.5 * (a.len() as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
    }
}

/// Solution of `P = A P Aᵀ + Q` by vectorization:
/// `(I − A ⊗ A) vec(P) = vec(Q)`.
pub fn discrete_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let kron = a.kronecker(a);
    let lhs = DMatrix::<f64>::identity(n * n, n * n) - kron;
    let rhs = DVector::from_column_slice(q.as_slice());
    let sol = lhs.lu().solve(&rhs).expect("stable transition");
    DMatrix::from_column_slice(n, n, sol.as_slice())
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = gaussian_matrix(rng, n, n, 0.5);
    &m * m.transpose() + DMatrix::identity(n, n) * 0.2
}

pub fn random_params(rng: &mut ChaCha8Rng, lz: usize, la: usize) -> LdsParams<f64> {
    let p = LdsParams {
        transition: from_na(&gaussian_matrix(rng, lz, lz, 0.5)),
        input: Tensor::zeros(lz, 0),
        emission: from_na(&gaussian_matrix(rng, la, lz, 1.0)),
        state_noise: from_na(&random_spd(rng, lz)),
        emission_noise: from_na(&random_spd(rng, la)),
        state_bias: (0..lz).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect(),
        emission_bias: (0..la).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect(),
    };
    p.validate().unwrap();
    p
}

pub fn max_abs_diff_vec(a: &[f64], b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_abs_diff_mat(a: &Tensor<f64>, b: &DMatrix<f64>) -> f64 {
    (to_na(a) - b).abs().max()
}

pub struct Instance {
    pub params: Vec<LdsParams<f64>>,
    pub shared: bool,
    pub init: LdsInit<f64>,
    pub obs: Vec<Vec<f64>>,
}

/// Random instance with `T ≤ 5`, state and observation dimensions `≤ 3`;
/// every third seed uses per-step parameters.
pub fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.gen_range(1..=5);
    let lz = rng.gen_range(1..=3);
    let la = rng.gen_range(1..=3);
    let shared = seed % 3 != 0;
    let params: Vec<_> = if shared {
        vec![random_params(&mut rng, lz, la); len]
    } else {
        (0..len).map(|_| random_params(&mut rng, lz, la)).collect()
    };
    let init = LdsInit {
        mean: (0..lz).map(|_| rng.sample(StandardNormal)).collect(),
        cov: from_na(&random_spd(&mut rng, lz)),
    };
    let obs = (0..len)
        .map(|_| (0..la).map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    Instance { params, shared, init, obs }
}

impl Instance {
    pub fn schedule(&self) -> Schedule<'_, f64> {
        if self.shared {
            Schedule::Shared(&self.params[0])
        } else {
            Schedule::PerStep(&self.params)
        }
    }
}

/// Largest deviation of the Kalman filter, smoother, cross-covariances and
/// log-marginal from dense conditioning on one instance.
pub fn kalman_deviation(inst: &Instance) -> f64 {
    let dense = JointGaussian::new(&inst.params, &inst.init);
    let filt = kalman_filter(inst.schedule(), &inst.init, &inst.obs, None).unwrap();
    let smooth = kalman_smooth(inst.schedule(), &inst.init, &inst.obs, None).unwrap();
    let mut worst: f64 = 0.0;
    for t in 0..inst.obs.len() {
        let (fm, fc) = dense.filtered(t, &inst.obs);
        let (sm, sc) = dense.smoothed(t, &inst.obs);
        worst = worst
            .max(max_abs_diff_vec(&filt.steps[t].mean, &fm))
            .max(max_abs_diff_mat(&filt.steps[t].cov, &fc))
            .max(max_abs_diff_vec(&smooth[t].mean, &sm))
            .max(max_abs_diff_mat(&smooth[t].cov, &sc));
        match &smooth[t].cross_cov_next {
            Some(cc) => worst = worst.max(max_abs_diff_mat(cc, &dense.smoothed_cross(t, &inst.obs))),
            None => assert_eq!(t + 1, inst.obs.len()),
        }
    }
    let lm = dense.log_marginal(&inst.obs);
    worst.max((filt.log_marginal - lm).abs() / lm.abs().max(1.0))
}
