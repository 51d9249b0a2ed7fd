use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{KvaeSettings, ModelConfig};
use crate::blocks::{GaussianHead, Linear, Mlp, MlpSpec, RecurrentCell, RecurrentCellConfig, Direction, CellState};
use crate::distributions::{graph_gaussian_log_prob, GaussianVar};
use crate::error::{DvaeError, Result};
use crate::graph::{Activation::Tanh, Graph, Var};
use crate::lds::{BankShape, LdsBank};
use crate::model::{
    draw_latent,
    DynamicalVae, KlTerm, ModelKind, Noise, ObsVar, ObservationHead, ObservationKind, SequenceBatch,
    SequencePass, StepContext, StepTerms,
};
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Parameter group of the linear dynamics (bank and mixing network).
pub const LDS_GROUP: &str = "lds";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KvaeConfig {
    pub x_dim: usize,
    pub observation: ObservationKind,
    pub encoder: MlpSpec,
    pub decoder: MlpSpec,
    pub lds: KvaeSettings,
}

impl KvaeConfig {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        Self {
            x_dim: cfg.x_dim,
            observation: cfg.observation,
            encoder: cfg.mlp(&[(256, Tanh), (128, Tanh)]),
            decoder: cfg.mlp(&[(128, Tanh), (256, Tanh)]),
            lds: cfg.kvae.clone(),
        }
    }
}

struct BankIds {
    transitions: Vec<ParamId>,
    inputs: Vec<ParamId>,
    emissions: Vec<ParamId>,
}

/// Kalman VAE: a frame-wise VAE between `x_t` and features `a_t`, with the
/// features following a linear-Gaussian state-space model whose matrices are
/// convex mixtures of a bank, weighted by `softmax(LSTM(a_{t-1}))`
/// (`a_0 = 0`) and driven by `u_t = a_{t-1}`.
///
/// Training evaluates the bound
/// `Σ_t log p(x_t|a_t) − [log q(a_{1:T}|x_{1:T}) − log p(a_{1:T})]`, with
/// `log p(a_{1:T})` from a differentiable Kalman filter. Drawing the state
/// trajectory exactly from the smoothing posterior `p(z|a)` turns the
/// trajectory-sampled terms `log p(a|z) + log p(z) − log p(z|a)` into this
/// same marginal for every draw, so the filter form is the zero-variance
/// version of that estimator. The per-step regularizer is
/// `log q(a_t|x_t) − log p(a_t|a_{1:t-1})`.
pub struct Kvae<T: Scalar> {
    cfg: KvaeConfig,
    params: ParamSet<T>,
    encoder: Mlp,
    encoder_head: GaussianHead,
    decoder: Mlp,
    decoder_head: ObservationHead,
    alpha_cell: RecurrentCell,
    alpha_out: Linear,
    bank: BankIds,
}

impl<T: Scalar> Kvae<T> {
    pub fn new<R: Rng + ?Sized>(cfg: KvaeConfig, rng: &mut R) -> Result<Self> {
        if cfg.lds.components == 0 {
            return Err(DvaeError::Config("KVAE needs at least one bank component".into()));
        }
        let mut params = ParamSet::new();
        let p = &mut params;
        let s = &cfg.lds;
        let encoder = Mlp::new(p, rng, "enc", "encoder", cfg.x_dim, &cfg.encoder)?;
        let encoder_head = GaussianHead::new(p, rng, "enc.head", "encoder", encoder.out_dim(), s.a_dim);
        let decoder = Mlp::new(p, rng, "dec", "decoder", s.a_dim, &cfg.decoder)?;
        let decoder_head =
            ObservationHead::new(p, rng, "dec.head", "decoder", decoder.out_dim(), cfg.x_dim, cfg.observation);
        let alpha_cell = RecurrentCell::new(
            p,
            rng,
            "lds.alpha.rnn",
            LDS_GROUP,
            RecurrentCellConfig::lstm(s.a_dim, s.alpha_hidden, Direction::Forward),
        );
        let alpha_out = Linear::new(p, rng, "lds.alpha.out", LDS_GROUP, s.alpha_hidden, s.components);
        let init: LdsBank<T> = LdsBank::init(
            rng,
            BankShape {
                components: s.components,
                state_dim: s.state_dim,
                obs_dim: s.a_dim,
                input_dim: s.a_dim,
            },
            s.bank_scale,
            s.state_noise,
            s.emission_noise,
        );
        let mut add_all = |name: &str, ms: Vec<Tensor<T>>| -> Vec<ParamId> {
            ms.into_iter()
                .enumerate()
                .map(|(k, m)| p.add(format!("lds.{name}.{k}"), LDS_GROUP, m))
                .collect()
        };
        let bank = BankIds {
            transitions: add_all("transition", init.transitions),
            inputs: add_all("input", init.inputs),
            emissions: add_all("emission", init.emissions),
        };
        Ok(Self {
            cfg,
            params,
            encoder,
            encoder_head,
            decoder,
            decoder_head,
            alpha_cell,
            alpha_out,
            bank,
        })
    }

    pub fn config(&self) -> &KvaeConfig {
        &self.cfg
    }

    /// Current bank as plain matrices.
    pub fn bank(&self) -> LdsBank<T> {
        let s = &self.cfg.lds;
        let get = |ids: &[ParamId]| ids.iter().map(|&id| self.params.get(id).clone()).collect();
        LdsBank {
            transitions: get(&self.bank.transitions),
            inputs: get(&self.bank.inputs),
            emissions: get(&self.bank.emissions),
            state_noise: crate::linalg::diag(&vec![T::lit(s.state_noise); s.state_dim]),
            emission_noise: crate::linalg::diag(&vec![T::lit(s.emission_noise); s.a_dim]),
        }
    }

    fn alpha_step(&self, g: &mut Graph<T>, state: &CellState, a_prev: Var) -> Result<(CellState, Var)> {
        let next = self.alpha_cell.step(g, &self.params, a_prev, state)?;
        let logits = self.alpha_out.forward(g, &self.params, next.h);
        Ok((next, g.softmax_rows(logits)))
    }

    /// Mixing weights `α_t` (one row per step) for a single feature sequence.
    pub fn alpha_sequence(&self, features: &[Vec<T>]) -> Result<Vec<Vec<T>>> {
        let mut g = Graph::new();
        let mut state = self.alpha_cell.initial_state(&mut g, 1);
        let mut a_prev = g.zeros(1, self.cfg.lds.a_dim);
        let mut out = Vec::with_capacity(features.len());
        for a in features {
            let (next, alpha) = self.alpha_step(&mut g, &state, a_prev)?;
            out.push(g.value(alpha).as_slice().to_vec());
            state = next;
            a_prev = g.input(Tensor::row_vector(a));
        }
        Ok(out)
    }

    /// `Σ_k w_k M_k` for one item, `w` being `1 × K`.
    fn mix(g: &mut Graph<T>, mats: &[Var], w: Var) -> Var {
        let mut acc: Option<Var> = None;
        for (k, &m) in mats.iter().enumerate() {
            let wk = g.slice(w, k, 1);
            let term = g.scale_by(m, wk);
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term),
            });
        }
        acc.expect("bank has at least one component")
    }

    /// Differentiable one-step predictive log-densities
    /// `log p(a_t | a_{1:t-1})` (`1 × 1` each) for one item.
    fn filter_log_likelihoods(
        &self,
        g: &mut Graph<T>,
        features: &[Var],
        weights: &[Var],
        bank: &(Vec<Var>, Vec<Var>, Vec<Var>),
    ) -> Result<Vec<Var>> {
        let s = &self.cfg.lds;
        let (lz, la) = (s.state_dim, s.a_dim);
        let lambda = g.input(crate::linalg::diag(&vec![T::lit(s.state_noise); lz]));
        let sigma = g.input(crate::linalg::diag(&vec![T::lit(s.emission_noise); la]));
        let eye = g.input(Tensor::identity(lz));
        let ln2pi = T::lit((2.0 * std::f64::consts::PI).ln());
        let mut mean = g.zeros(lz, 1);
        let mut cov = lambda;
        let mut out = Vec::with_capacity(features.len());
        for (t, (&a, &w)) in features.iter().zip(weights).enumerate() {
            let c = Self::mix(g, &bank.2, w);
            if t > 0 {
                let a_mat = Self::mix(g, &bank.0, w);
                let b_mat = Self::mix(g, &bank.1, w);
                let am = g.matmul(a_mat, mean);
                let bu = g.matmul(b_mat, features[t - 1]);
                mean = g.add(am, bu);
                let at = g.transpose(a_mat);
                let ap = g.matmul(a_mat, cov);
                let apa = g.matmul(ap, at);
                cov = g.add(apa, lambda);
            }
            let ct = g.transpose(c);
            let cp = g.matmul(c, cov);
            let cpc = g.matmul(cp, ct);
            let innov_cov = g.add(cpc, sigma);
            let inv = g.spd_inverse(innov_cov).map_err(|e| {
                DvaeError::Numerical(format!("KVAE filter innovation covariance at step {}: {e}", t + 1))
            })?;
            let logdet = g.spd_logdet(innov_cov)?;
            let pred = g.matmul(c, mean);
            let e = g.sub(a, pred);
            let et = g.transpose(e);
            let se = g.matmul(inv, e);
            let quad = g.matmul(et, se);
            let s_sum = g.add(logdet, quad);
            let s_sum = g.offset(s_sum, T::lit(la as f64) * ln2pi);
            out.push(g.scale(s_sum, T::lit(-0.5)));

            let pct = g.matmul(cov, ct);
            let gain = g.matmul(pct, inv);
            let ke = g.matmul(gain, e);
            mean = g.add(mean, ke);
            let kc = g.matmul(gain, c);
            let ikc = g.sub(eye, kc);
            let ikct = g.transpose(ikc);
            let left = g.matmul(ikc, cov);
            let joseph = g.matmul(left, ikct);
            let gt = g.transpose(gain);
            let ks = g.matmul(gain, sigma);
            let ksk = g.matmul(ks, gt);
            let full = g.add(joseph, ksk);
            let full_t = g.transpose(full);
            let sym = g.add(full, full_t);
            cov = g.scale(sym, T::lit(0.5));
        }
        Ok(out)
    }

    fn decode(&self, g: &mut Graph<T>, a: Var) -> Result<ObsVar> {
        let h = self.decoder.forward(g, &self.params, a)?;
        self.decoder_head.forward(g, &self.params, h)
    }
}

impl<T: Scalar> DynamicalVae<T> for Kvae<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::Kvae
    }

    fn x_dim(&self) -> usize {
        self.cfg.x_dim
    }

    /// The per-frame latent of the VAE part (`a_t`).
    fn z_dim(&self) -> usize {
        self.cfg.lds.a_dim
    }

    fn observation(&self) -> ObservationKind {
        self.cfg.observation
    }

    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn needs_future_x(&self) -> bool {
        false
    }

    fn run_with(
        &self,
        g: &mut Graph<T>,
        batch: &SequenceBatch<T>,
        noise: &mut Noise<'_>,
        forced: Option<&[Var]>,
    ) -> Result<SequencePass> {
        let p = &self.params;
        let b = batch.batch_size();
        let la = self.cfg.lds.a_dim;
        let xs = batch.inputs(g);
        let mut posts = Vec::with_capacity(xs.len());
        let mut feats = Vec::with_capacity(xs.len());
        let mut log_q = Vec::with_capacity(xs.len());
        let mut obs = Vec::with_capacity(xs.len());
        for &x in &xs {
            let h = self.encoder.forward(g, p, x)?;
            let q = self.encoder_head.forward(g, p, h)?;
            let eps = noise.normal(b, la);
            let a = draw_latent(g, q, eps, forced, feats.len());
            log_q.push(graph_gaussian_log_prob(g, a, q));
            obs.push(self.decode(g, a)?);
            posts.push(q);
            feats.push(a);
        }

        let mut state = self.alpha_cell.initial_state(g, b);
        let mut a_prev = g.zeros(b, la);
        let mut alphas_t = Vec::with_capacity(xs.len());
        for &a in &feats {
            let (next, alpha) = self.alpha_step(g, &state, a_prev)?;
            alphas_t.push(g.transpose(alpha));
            state = next;
            a_prev = a;
        }
        let feats_t: Vec<Var> = feats.iter().map(|&a| g.transpose(a)).collect();
        let bank_vars = (
            self.bank.transitions.iter().map(|&id| g.param(p, id)).collect::<Vec<_>>(),
            self.bank.inputs.iter().map(|&id| g.param(p, id)).collect::<Vec<_>>(),
            self.bank.emissions.iter().map(|&id| g.param(p, id)).collect::<Vec<_>>(),
        );

        let mut per_item: Vec<Vec<Var>> = Vec::with_capacity(b);
        for item in 0..b {
            let cols: Vec<Var> = feats_t.iter().map(|&ft| g.slice(ft, item, 1)).collect();
            let weights: Vec<Var> = alphas_t
                .iter()
                .map(|&at| {
                    let col = g.slice(at, item, 1);
                    g.transpose(col)
                })
                .collect();
            per_item.push(self.filter_log_likelihoods(g, &cols, &weights, &bank_vars)?);
        }

        let mut steps = Vec::with_capacity(xs.len());
        for t in 0..xs.len() {
            let row: Vec<Var> = per_item.iter().map(|lls| lls[t]).collect();
            let row = if row.len() == 1 { row[0] } else { g.concat(&row) };
            let col = g.transpose(row);
            let kl = g.sub(log_q[t], col);
            steps.push(StepTerms {
                posterior: posts[t],
                kl: KlTerm::Estimated(kl),
                z: feats[t],
                obs: obs[t],
            });
        }
        Ok(SequencePass {
            steps,
            sequence_posterior: None,
        })
    }

    fn start_generation(&self, g: &mut Graph<T>, batch: usize, _noise: &mut Noise<'_>) -> Result<StepContext> {
        let mut ctx = StepContext::new(g, batch, self.cfg.x_dim, self.cfg.lds.a_dim);
        ctx.states.push(self.alpha_cell.initial_state(g, batch));
        let z = g.zeros(batch, self.cfg.lds.state_dim);
        ctx.states.push(CellState { h: z, c: None });
        Ok(ctx)
    }

    /// Draws the linear state `z_t` and returns `p(a_t | z_t)`.
    fn prior_step(&self, g: &mut Graph<T>, ctx: &mut StepContext, noise: &mut Noise<'_>) -> Result<GaussianVar> {
        let s = &self.cfg.lds;
        let (next, alpha) = self.alpha_step(g, &ctx.states[0], ctx.prev_z)?;
        ctx.states[0] = next;
        let alpha = g.value(alpha).clone();
        let bank = self.bank();
        let z_prev = g.value(ctx.states[1].h).clone();
        let a_prev = g.value(ctx.prev_z).clone();
        let eps = noise.normal::<T>(ctx.batch, s.state_dim);
        let sd = T::lit(s.state_noise.sqrt());
        let mut z = Tensor::zeros(ctx.batch, s.state_dim);
        let mut a_mean = Tensor::zeros(ctx.batch, s.a_dim);
        for item in 0..ctx.batch {
            let mixed = crate::lds::mix_bank(&bank, alpha.row(item))?;
            let zi: Vec<T> = if ctx.t == 0 {
                eps.row(item).iter().map(|&e| e * sd).collect()
            } else {
                let zp = Tensor::from_vec(s.state_dim, 1, z_prev.row(item).to_vec())?;
                let ap = Tensor::from_vec(s.a_dim, 1, a_prev.row(item).to_vec())?;
                let m = mixed.transition.matmul(&zp);
                let u = mixed.input.matmul(&ap);
                (0..s.state_dim).map(|r| m[(r, 0)] + u[(r, 0)] + eps[(item, r)] * sd).collect()
            };
            let zc = Tensor::from_vec(s.state_dim, 1, zi.clone())?;
            let am = mixed.emission.matmul(&zc);
            z.row_mut(item).copy_from_slice(&zi);
            a_mean.row_mut(item).copy_from_slice(am.as_slice());
        }
        ctx.states[1] = CellState { h: g.input(z), c: None };
        let mean = g.input(a_mean);
        let log_var = g.input(Tensor::filled(ctx.batch, s.a_dim, T::lit(s.emission_noise.ln())));
        Ok(GaussianVar { mean, log_var })
    }

    fn decode_step(&self, g: &mut Graph<T>, _ctx: &mut StepContext, a: Var) -> Result<ObsVar> {
        self.decode(g, a)
    }
}
