use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::blocks::{recurrent_unroll, CellState, Direction, GaussianHead, Mlp, MlpSpec, RecurrentCell, RecurrentCellConfig};
use crate::distributions::{standard_normal_var, GaussianVar};
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
pub struct StornConfig {
    pub x_dim: usize,
    pub z_dim: usize,
    pub rnn_hidden: usize,
    pub observation: ObservationKind,
    pub decoder_frame_features: MlpSpec,
    pub decoder_latent_features: MlpSpec,
    pub decoder_output: MlpSpec,
    pub encoder_frame_features: MlpSpec,
    pub encoder_output: MlpSpec,
}

impl StornConfig {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        Self {
            x_dim: cfg.x_dim,
            z_dim: cfg.z_dim,
            rnn_hidden: cfg.rnn_hidden,
            observation: cfg.observation,
            decoder_frame_features: cfg.mlp(&[(256, Tanh)]),
            decoder_latent_features: cfg.mlp(&[(32, Tanh), (64, Tanh)]),
            decoder_output: cfg.mlp(&[(256, Tanh)]),
            encoder_frame_features: cfg.mlp(&[(256, Tanh)]),
            encoder_output: cfg.mlp(&[(64, Tanh), (32, Tanh)]),
        }
    }
}

/// Stochastic recurrent network: i.i.d. standard-normal latents feeding a
/// decoder recurrence `h_t = d_h(x_{t-1}, z_t, h_{t-1})`, with a separate
/// causal encoder recurrence `q(z_t | x_{1:t})`.
pub struct Storn<T: Scalar> {
    cfg: StornConfig,
    params: ParamSet<T>,
    dec_x: Mlp,
    dec_z: Mlp,
    dec_cell: RecurrentCell,
    dec_out: Mlp,
    dec_head: ObservationHead,
    enc_x: Mlp,
    enc_cell: RecurrentCell,
    enc_out: Mlp,
    enc_head: GaussianHead,
}

impl<T: Scalar> Storn<T> {
    pub fn new<R: Rng + ?Sized>(cfg: StornConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamSet::new();
        let p = &mut params;
        let dec_x = Mlp::new(p, rng, "dec.x", "decoder", cfg.x_dim, &cfg.decoder_frame_features)?;
        let dec_z = Mlp::new(p, rng, "dec.z", "decoder", cfg.z_dim, &cfg.decoder_latent_features)?;
        let dec_cell = RecurrentCell::new(
            p,
            rng,
            "dec.rnn",
            "decoder",
            RecurrentCellConfig::lstm(dec_x.out_dim() + dec_z.out_dim(), cfg.rnn_hidden, Direction::Forward),
        );
        let dec_out = Mlp::new(p, rng, "dec.out", "decoder", cfg.rnn_hidden, &cfg.decoder_output)?;
        let dec_head = ObservationHead::new(p, rng, "dec.head", "decoder", dec_out.out_dim(), cfg.x_dim, cfg.observation);
        let enc_x = Mlp::new(p, rng, "enc.x", "encoder", cfg.x_dim, &cfg.encoder_frame_features)?;
        let enc_cell = RecurrentCell::new(
            p,
            rng,
            "enc.rnn",
            "encoder",
            RecurrentCellConfig::lstm(enc_x.out_dim(), cfg.rnn_hidden, Direction::Forward),
        );
        let enc_out = Mlp::new(p, rng, "enc.out", "encoder", cfg.rnn_hidden, &cfg.encoder_output)?;
        let enc_head = GaussianHead::new(p, rng, "enc.head", "encoder", enc_out.out_dim(), cfg.z_dim);
        Ok(Self {
            cfg,
            params,
            dec_x,
            dec_z,
            dec_cell,
            dec_out,
            dec_head,
            enc_x,
            enc_cell,
            enc_out,
            enc_head,
        })
    }

    pub fn config(&self) -> &StornConfig {
        &self.cfg
    }

    /// Advances the decoder recurrence with `(x_{t-1}, z_t)` and returns the
    /// observation parameters of `x_t`.
    fn decode(&self, g: &mut Graph<T>, state: &mut CellState, x_prev: Var, z: Var) -> Result<ObsVar> {
        let p = &self.params;
        let fx = self.dec_x.forward(g, p, x_prev)?;
        let fz = self.dec_z.forward(g, p, z)?;
        let input = g.concat(&[fx, fz]);
        *state = self.dec_cell.step(g, p, input, state)?;
        let h = self.dec_out.forward(g, p, state.h)?;
        self.dec_head.forward(g, p, h)
    }
}

impl<T: Scalar> DynamicalVae<T> for Storn<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::Storn
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
        let xs = batch.inputs(g);
        let feats = xs
            .iter()
            .map(|&x| self.enc_x.forward(g, p, x))
            .collect::<Result<Vec<_>>>()?;
        let enc_states = recurrent_unroll(g, p, &self.enc_cell, &feats, None, None)?;
        let mut dec_state = self.dec_cell.initial_state(g, b);
        let mut x_prev = g.zeros(b, self.cfg.x_dim);
        let mut steps = Vec::with_capacity(xs.len());
        for (t, &h_enc) in enc_states.iter().enumerate() {
            let e = self.enc_out.forward(g, p, h_enc)?;
            let posterior = self.enc_head.forward(g, p, e)?;
            let eps = noise.normal(b, self.cfg.z_dim);
            let z = draw_latent(g, posterior, eps, forced, t);
            let obs = self.decode(g, &mut dec_state, x_prev, z)?;
            steps.push(StepTerms {
                posterior,
                kl: KlTerm::StandardNormal,
                z,
                obs,
            });
            x_prev = xs[t];
        }
        Ok(SequencePass {
            steps,
            sequence_posterior: None,
        })
    }

    fn start_generation(&self, g: &mut Graph<T>, batch: usize, _noise: &mut Noise<'_>) -> Result<StepContext> {
        let mut ctx = StepContext::new(g, batch, self.cfg.x_dim, self.cfg.z_dim);
        ctx.states.push(self.dec_cell.initial_state(g, batch));
        Ok(ctx)
    }

    fn prior_step(&self, g: &mut Graph<T>, ctx: &mut StepContext, _noise: &mut Noise<'_>) -> Result<GaussianVar> {
        Ok(standard_normal_var(g, ctx.batch, self.cfg.z_dim))
    }

    fn decode_step(&self, g: &mut Graph<T>, ctx: &mut StepContext, z: Var) -> Result<ObsVar> {
        let mut state = ctx.states[0];
        let obs = self.decode(g, &mut state, ctx.prev_x, z)?;
        ctx.states[0] = state;
        Ok(obs)
    }
}
