use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::blocks::{recurrent_unroll, CellState, Direction, GaussianHead, Mlp, MlpSpec, RecurrentCell, RecurrentCellConfig};
use crate::distributions::{GaussianVar};
use crate::error::Result;
use crate::graph::{Activation::Tanh, Graph, Var};
use crate::model::{
    draw_latent,
    DynamicalVae, KlTerm, ModelKind, Noise, ObsVar, ObservationHead, ObservationKind, SequenceBatch, SequencePass,
    StepContext, StepTerms,
};
use crate::params::ParamSet;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrnnConfig {
    pub x_dim: usize,
    pub z_dim: usize,
    pub rnn_hidden: usize,
    pub observation: ObservationKind,
    pub frame_features: MlpSpec,
    pub prior: MlpSpec,
    pub decoder: MlpSpec,
    /// Features of `[h_t, x_t]` for the inference recurrence.
    pub inference_features: MlpSpec,
    pub encoder: MlpSpec,
    /// Causal inference `q(z_t | z_{t-1}, h_t, x_t)` instead of smoothing.
    pub filtering: bool,
}

impl SrnnConfig {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        Self {
            x_dim: cfg.x_dim,
            z_dim: cfg.z_dim,
            rnn_hidden: cfg.rnn_hidden,
            observation: cfg.observation,
            frame_features: cfg.mlp(&[(256, Tanh)]),
            prior: cfg.mlp(&[(64, Tanh), (32, Tanh)]),
            decoder: cfg.mlp(&[(256, Tanh)]),
            inference_features: cfg.mlp(&[(256, Tanh)]),
            encoder: cfg.mlp(&[(64, Tanh), (32, Tanh)]),
            filtering: cfg.srnn_filtering,
        }
    }
}

/// Stochastic recurrent neural network: a deterministic recurrence over past
/// frames (`h_t` from `x_{1:t-1}`, zero at `t = 1`) under a Markov latent
/// chain `p(z_t | z_{t-1}, h_t)`; the encoder smooths with a backward
/// recurrence over `[h_t, x_t]`.
pub struct Srnn<T: Scalar> {
    cfg: SrnnConfig,
    params: ParamSet<T>,
    frame_features: Mlp,
    cell: RecurrentCell,
    prior: Mlp,
    prior_head: GaussianHead,
    decoder: Mlp,
    decoder_head: ObservationHead,
    inference_features: Mlp,
    backward: Option<RecurrentCell>,
    encoder: Mlp,
    encoder_head: GaussianHead,
}

impl<T: Scalar> Srnn<T> {
    pub fn new<R: Rng + ?Sized>(cfg: SrnnConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamSet::new();
        let p = &mut params;
        let h = cfg.rnn_hidden;
        let l = cfg.z_dim;
        let frame_features = Mlp::new(p, rng, "h.x", "shared", cfg.x_dim, &cfg.frame_features)?;
        let cell = RecurrentCell::new(
            p,
            rng,
            "h.rnn",
            "shared",
            RecurrentCellConfig::lstm(frame_features.out_dim(), h, Direction::Forward),
        );
        let prior = Mlp::new(p, rng, "prior", "prior", l + h, &cfg.prior)?;
        let prior_head = GaussianHead::new(p, rng, "prior.head", "prior", prior.out_dim(), l);
        let decoder = Mlp::new(p, rng, "dec", "decoder", l + h, &cfg.decoder)?;
        let decoder_head =
            ObservationHead::new(p, rng, "dec.head", "decoder", decoder.out_dim(), cfg.x_dim, cfg.observation);
        let inference_features = Mlp::new(p, rng, "enc.hx", "encoder", h + cfg.x_dim, &cfg.inference_features)?;
        let backward = (!cfg.filtering).then(|| {
            RecurrentCell::new(
                p,
                rng,
                "enc.rnn",
                "encoder",
                RecurrentCellConfig::lstm(inference_features.out_dim(), h, Direction::Backward),
            )
        });
        let ctx_dim = if backward.is_some() { h } else { inference_features.out_dim() };
        let encoder = Mlp::new(p, rng, "enc", "encoder", l + ctx_dim, &cfg.encoder)?;
        let encoder_head = GaussianHead::new(p, rng, "enc.head", "encoder", encoder.out_dim(), l);
        Ok(Self {
            cfg,
            params,
            frame_features,
            cell,
            prior,
            prior_head,
            decoder,
            decoder_head,
            inference_features,
            backward,
            encoder,
            encoder_head,
        })
    }

    pub fn config(&self) -> &SrnnConfig {
        &self.cfg
    }

    fn advance(&self, g: &mut Graph<T>, state: &CellState, x_prev: Var) -> Result<CellState> {
        let f = self.frame_features.forward(g, &self.params, x_prev)?;
        self.cell.step(g, &self.params, f, state)
    }

    /// Deterministic states `h_1..h_T` (z-free; `h_1` is zero).
    pub fn hidden_states(&self, g: &mut Graph<T>, xs: &[Var]) -> Result<Vec<Var>> {
        let Some(&first) = xs.first() else { return Ok(Vec::new()) };
        let b = g.shape(first).0;
        let mut state = self.cell.initial_state(g, b);
        let mut out = vec![state.h];
        for t in 1..xs.len() {
            state = self.advance(g, &state, xs[t - 1])?;
            out.push(state.h);
        }
        Ok(out)
    }

    fn prior_at(&self, g: &mut Graph<T>, z_prev: Var, h: Var) -> Result<GaussianVar> {
        let input = g.concat(&[z_prev, h]);
        let d = self.prior.forward(g, &self.params, input)?;
        self.prior_head.forward(g, &self.params, d)
    }

    fn decode_at(&self, g: &mut Graph<T>, z: Var, h: Var) -> Result<ObsVar> {
        let input = g.concat(&[z, h]);
        let d = self.decoder.forward(g, &self.params, input)?;
        self.decoder_head.forward(g, &self.params, d)
    }
}

impl<T: Scalar> DynamicalVae<T> for Srnn<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::Srnn
    }

    fn x_dim(&self) -> usize {
        self.cfg.x_dim
    }

    fn z_dim(&self) -> usize {
        self.cfg.z_dim
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
        self.backward.is_some()
    }

    fn shares_decoder_state_with_encoder(&self) -> bool {
        true
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
        let xs = batch.inputs(g);
        let hs = self.hidden_states(g, &xs)?;
        let feats = hs
            .iter()
            .zip(&xs)
            .map(|(&h, &x)| {
                let hx = g.concat(&[h, x]);
                self.inference_features.forward(g, p, hx)
            })
            .collect::<Result<Vec<_>>>()?;
        let ctx = match &self.backward {
            Some(cell) => {
                let masks = batch.mask_inputs(g);
                recurrent_unroll(g, p, cell, &feats, None, masks.as_deref())?
            }
            None => feats,
        };
        let mut z_prev = g.zeros(b, self.cfg.z_dim);
        let mut steps = Vec::with_capacity(xs.len());
        for (t, &c) in ctx.iter().enumerate() {
            let prior = self.prior_at(g, z_prev, hs[t])?;
            let input = g.concat(&[z_prev, c]);
            let e = self.encoder.forward(g, p, input)?;
            let posterior = self.encoder_head.forward(g, p, e)?;
            let eps = noise.normal(b, self.cfg.z_dim);
            let z = draw_latent(g, posterior, eps, forced, t);
            let obs = self.decode_at(g, z, hs[t])?;
            steps.push(StepTerms {
                posterior,
                kl: KlTerm::Prior(prior),
                z,
                obs,
            });
            z_prev = z;
        }
        Ok(SequencePass {
            steps,
            sequence_posterior: None,
        })
    }

    fn start_generation(&self, g: &mut Graph<T>, batch: usize, _noise: &mut Noise<'_>) -> Result<StepContext> {
        let mut ctx = StepContext::new(g, batch, self.cfg.x_dim, self.cfg.z_dim);
        ctx.states.push(self.cell.initial_state(g, batch));
        Ok(ctx)
    }

    fn prior_step(&self, g: &mut Graph<T>, ctx: &mut StepContext, _noise: &mut Noise<'_>) -> Result<GaussianVar> {
        if ctx.t > 0 {
            ctx.states[0] = self.advance(g, &ctx.states[0], ctx.prev_x)?;
        }
        self.prior_at(g, ctx.prev_z, ctx.states[0].h)
    }

    fn decode_step(&self, g: &mut Graph<T>, ctx: &mut StepContext, z: Var) -> Result<ObsVar> {
        self.decode_at(g, z, ctx.states[0].h)
    }
}
