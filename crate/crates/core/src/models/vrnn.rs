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
pub struct VrnnConfig {
    pub x_dim: usize,
    pub z_dim: usize,
    pub rnn_hidden: usize,
    pub observation: ObservationKind,
    pub frame_features: MlpSpec,
    pub latent_features: MlpSpec,
    pub prior: MlpSpec,
    pub decoder: MlpSpec,
    pub encoder: MlpSpec,
    /// Encoder also reads a backward recurrence over frame features.
    pub backward_inference: bool,
}

impl VrnnConfig {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        Self {
            x_dim: cfg.x_dim,
            z_dim: cfg.z_dim,
            rnn_hidden: cfg.rnn_hidden,
            observation: cfg.observation,
            frame_features: cfg.mlp(&[(256, Tanh)]),
            latent_features: cfg.mlp(&[(32, Tanh), (64, Tanh)]),
            prior: cfg.mlp(&[(64, Tanh), (32, Tanh)]),
            decoder: cfg.mlp(&[(256, Tanh)]),
            encoder: cfg.mlp(&[(128, Tanh), (64, Tanh)]),
            backward_inference: cfg.vrnn_backward_inference,
        }
    }
}

/// Variational recurrent network: one recurrence
/// `h_t = d_h(φx(x_{t-1}), φz(z_{t-1}), h_{t-1})` (zero at `t = 1`) drives the
/// prior `p(z_t | h_t)`, the decoder `p(x_t | φz(z_t), h_t)` and the encoder
/// `q(z_t | φx(x_t), h_t)`.
pub struct Vrnn<T: Scalar> {
    cfg: VrnnConfig,
    params: ParamSet<T>,
    phi_x: Mlp,
    phi_z: Mlp,
    cell: RecurrentCell,
    prior: Mlp,
    prior_head: GaussianHead,
    decoder: Mlp,
    decoder_head: ObservationHead,
    encoder: Mlp,
    encoder_head: GaussianHead,
    backward: Option<RecurrentCell>,
}

impl<T: Scalar> Vrnn<T> {
    pub fn new<R: Rng + ?Sized>(cfg: VrnnConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamSet::new();
        let p = &mut params;
        let h = cfg.rnn_hidden;
        let phi_x = Mlp::new(p, rng, "phi_x", "shared", cfg.x_dim, &cfg.frame_features)?;
        let phi_z = Mlp::new(p, rng, "phi_z", "shared", cfg.z_dim, &cfg.latent_features)?;
        let cell = RecurrentCell::new(
            p,
            rng,
            "rnn",
            "shared",
            RecurrentCellConfig::lstm(phi_x.out_dim() + phi_z.out_dim(), h, Direction::Forward),
        );
        let prior = Mlp::new(p, rng, "prior", "prior", h, &cfg.prior)?;
        let prior_head = GaussianHead::new(p, rng, "prior.head", "prior", prior.out_dim(), cfg.z_dim);
        let decoder = Mlp::new(p, rng, "dec", "decoder", phi_z.out_dim() + h, &cfg.decoder)?;
        let decoder_head =
            ObservationHead::new(p, rng, "dec.head", "decoder", decoder.out_dim(), cfg.x_dim, cfg.observation);
        let backward = cfg.backward_inference.then(|| {
            RecurrentCell::new(
                p,
                rng,
                "enc.rnn",
                "encoder",
                RecurrentCellConfig::lstm(phi_x.out_dim(), h, Direction::Backward),
            )
        });
        let enc_in = if backward.is_some() { 2 * h } else { phi_x.out_dim() + h };
        let encoder = Mlp::new(p, rng, "enc", "encoder", enc_in, &cfg.encoder)?;
        let encoder_head = GaussianHead::new(p, rng, "enc.head", "encoder", encoder.out_dim(), cfg.z_dim);
        Ok(Self {
            cfg,
            params,
            phi_x,
            phi_z,
            cell,
            prior,
            prior_head,
            decoder,
            decoder_head,
            encoder,
            encoder_head,
            backward,
        })
    }

    pub fn config(&self) -> &VrnnConfig {
        &self.cfg
    }

    /// `h_t` from `h_{t-1}` and the previous frame/latent.
    fn advance(&self, g: &mut Graph<T>, state: &CellState, x_prev: Var, z_prev: Var) -> Result<CellState> {
        let p = &self.params;
        let fx = self.phi_x.forward(g, p, x_prev)?;
        let fz = self.phi_z.forward(g, p, z_prev)?;
        let input = g.concat(&[fx, fz]);
        self.cell.step(g, p, input, state)
    }

    fn prior_at(&self, g: &mut Graph<T>, h: Var) -> Result<GaussianVar> {
        let d = self.prior.forward(g, &self.params, h)?;
        self.prior_head.forward(g, &self.params, d)
    }

    fn decode_at(&self, g: &mut Graph<T>, h: Var, z: Var) -> Result<ObsVar> {
        let p = &self.params;
        let fz = self.phi_z.forward(g, p, z)?;
        let input = g.concat(&[fz, h]);
        let d = self.decoder.forward(g, p, input)?;
        self.decoder_head.forward(g, p, d)
    }

    /// Recurrent states `h_1..h_T` along a given trajectory (`h_1` is zero).
    pub fn hidden_states(&self, g: &mut Graph<T>, xs: &[Var], zs: &[Var]) -> Result<Vec<Var>> {
        let Some(&first) = xs.first() else { return Ok(Vec::new()) };
        let b = g.shape(first).0;
        let mut state = self.cell.initial_state(g, b);
        let mut out = vec![state.h];
        for t in 1..xs.len() {
            state = self.advance(g, &state, xs[t - 1], zs[t - 1])?;
            out.push(state.h);
        }
        Ok(out)
    }
}

impl<T: Scalar> DynamicalVae<T> for Vrnn<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::Vrnn
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
        let fxs = xs
            .iter()
            .map(|&x| self.phi_x.forward(g, p, x))
            .collect::<Result<Vec<_>>>()?;
        let back = match &self.backward {
            Some(cell) => {
                let masks = batch.mask_inputs(g);
                Some(recurrent_unroll(g, p, cell, &fxs, None, masks.as_deref())?)
            }
            None => None,
        };
        let mut state = self.cell.initial_state(g, b);
        let mut steps: Vec<StepTerms> = Vec::with_capacity(xs.len());
        for t in 0..xs.len() {
            if let Some(prev) = steps.last() {
                state = self.advance(g, &state, xs[t - 1], prev.z)?;
            }
            let h = state.h;
            let prior = self.prior_at(g, h)?;
            let enc_in = match &back {
                Some(bk) => g.concat(&[bk[t], h]),
                None => g.concat(&[fxs[t], h]),
            };
            let e = self.encoder.forward(g, p, enc_in)?;
            let posterior = self.encoder_head.forward(g, p, e)?;
            let eps = noise.normal(b, self.cfg.z_dim);
            let z = draw_latent(g, posterior, eps, forced, t);
            let obs = self.decode_at(g, h, z)?;
            steps.push(StepTerms {
                posterior,
                kl: KlTerm::Prior(prior),
                z,
                obs,
            });
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
            ctx.states[0] = self.advance(g, &ctx.states[0], ctx.prev_x, ctx.prev_z)?;
        }
        self.prior_at(g, ctx.states[0].h)
    }

    fn decode_step(&self, g: &mut Graph<T>, ctx: &mut StepContext, z: Var) -> Result<ObsVar> {
        self.decode_at(g, ctx.states[0].h, z)
    }
}
