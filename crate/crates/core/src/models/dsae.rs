use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::blocks::{
    bidirectional_unroll, recurrent_unroll, CellState, Direction, GaussianHead, Mlp, MlpSpec, RecurrentCell,
    RecurrentCellConfig,
};
use crate::distributions::{graph_reparam, standard_normal_var, GaussianVar};
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
pub struct DsaeConfig {
    pub x_dim: usize,
    pub z_dim: usize,
    /// Dimension of the sequence-level latent `v`.
    pub v_dim: usize,
    pub rnn_hidden: usize,
    /// Hidden size of the latent-dynamics and combiner recurrences.
    pub small_hidden: usize,
    pub observation: ObservationKind,
    pub decoder: MlpSpec,
    pub frame_features: MlpSpec,
    pub sequence_encoder: MlpSpec,
    pub frame_encoder: MlpSpec,
}

impl DsaeConfig {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        Self {
            x_dim: cfg.x_dim,
            z_dim: cfg.z_dim,
            v_dim: cfg.dsae_v_dim,
            rnn_hidden: cfg.rnn_hidden,
            small_hidden: cfg.dsae_hidden,
            observation: cfg.observation,
            decoder: cfg.mlp(&[(32, Tanh), (64, Tanh), (128, Tanh), (256, Tanh)]),
            frame_features: cfg.mlp(&[(256, Tanh)]),
            sequence_encoder: cfg.mlp(&[(64, Tanh), (32, Tanh)]),
            frame_encoder: cfg.mlp(&[(256, Tanh)]),
        }
    }
}

/// Disentangled sequential autoencoder: one latent `v ~ N(0, I)` per
/// sequence plus a dynamic chain `p(z_t | z_{1:t-1})` given by a small
/// recurrence over past latents (zero state at `t = 1`); frames decode from
/// `[z_t, v]`. Inference draws `v` from a bidirectional summary of the whole
/// sequence, then every `z_t` from `q(z_t | v, x_{1:T})`.
pub struct Dsae<T: Scalar> {
    cfg: DsaeConfig,
    params: ParamSet<T>,
    prior_cell: RecurrentCell,
    prior_head: GaussianHead,
    decoder: Mlp,
    decoder_head: ObservationHead,
    frame_features: Mlp,
    v_fwd: RecurrentCell,
    v_bwd: RecurrentCell,
    v_encoder: Mlp,
    v_head: GaussianHead,
    z_input: Mlp,
    z_fwd: RecurrentCell,
    z_bwd: RecurrentCell,
    z_combiner: RecurrentCell,
    z_head: GaussianHead,
}

impl<T: Scalar> Dsae<T> {
    pub fn new<R: Rng + ?Sized>(cfg: DsaeConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamSet::new();
        let p = &mut params;
        let (h, hs, l, lv) = (cfg.rnn_hidden, cfg.small_hidden, cfg.z_dim, cfg.v_dim);
        let prior_cell = RecurrentCell::new(
            p,
            rng,
            "prior.rnn",
            "prior",
            RecurrentCellConfig::lstm(l, hs, Direction::Forward),
        );
        let prior_head = GaussianHead::new(p, rng, "prior.head", "prior", hs, l);
        let decoder = Mlp::new(p, rng, "dec", "decoder", l + lv, &cfg.decoder)?;
        let decoder_head =
            ObservationHead::new(p, rng, "dec.head", "decoder", decoder.out_dim(), cfg.x_dim, cfg.observation);
        let frame_features = Mlp::new(p, rng, "enc.x", "encoder", cfg.x_dim, &cfg.frame_features)?;
        let fx = frame_features.out_dim();
        let v_fwd = RecurrentCell::new(p, rng, "enc.v.fwd", "encoder", RecurrentCellConfig::lstm(fx, h, Direction::Forward));
        let v_bwd = RecurrentCell::new(p, rng, "enc.v.bwd", "encoder", RecurrentCellConfig::lstm(fx, h, Direction::Backward));
        let v_encoder = Mlp::new(p, rng, "enc.v", "encoder", 2 * h, &cfg.sequence_encoder)?;
        let v_head = GaussianHead::new(p, rng, "enc.v.head", "encoder", v_encoder.out_dim(), lv);
        let z_input = Mlp::new(p, rng, "enc.z.in", "encoder", lv + fx, &cfg.frame_encoder)?;
        let zi = z_input.out_dim();
        let z_fwd = RecurrentCell::new(p, rng, "enc.z.fwd", "encoder", RecurrentCellConfig::lstm(zi, h, Direction::Forward));
        let z_bwd = RecurrentCell::new(p, rng, "enc.z.bwd", "encoder", RecurrentCellConfig::lstm(zi, h, Direction::Backward));
        let z_combiner = RecurrentCell::new(
            p,
            rng,
            "enc.z.comb",
            "encoder",
            RecurrentCellConfig::lstm(2 * h, hs, Direction::Forward),
        );
        let z_head = GaussianHead::new(p, rng, "enc.z.head", "encoder", hs, l);
        Ok(Self {
            cfg,
            params,
            prior_cell,
            prior_head,
            decoder,
            decoder_head,
            frame_features,
            v_fwd,
            v_bwd,
            v_encoder,
            v_head,
            z_input,
            z_fwd,
            z_bwd,
            z_combiner,
            z_head,
        })
    }

    pub fn config(&self) -> &DsaeConfig {
        &self.cfg
    }

    pub fn prior_cell(&self) -> &RecurrentCell {
        &self.prior_cell
    }

    pub fn prior_head(&self) -> &GaussianHead {
        &self.prior_head
    }

    /// `p(z_t | z_{1:t-1})` after advancing the dynamics state with `z_prev`
    /// (no advance at the first step).
    fn prior_at(&self, g: &mut Graph<T>, state: &mut CellState, z_prev: Option<Var>) -> Result<GaussianVar> {
        if let Some(z) = z_prev {
            *state = self.prior_cell.step(g, &self.params, z, state)?;
        }
        self.prior_head.forward(g, &self.params, state.h)
    }

    pub fn decode_at(&self, g: &mut Graph<T>, z: Var, v: Var) -> Result<ObsVar> {
        let input = g.concat(&[z, v]);
        let d = self.decoder.forward(g, &self.params, input)?;
        self.decoder_head.forward(g, &self.params, d)
    }

    /// `q(v | x_{1:T})` from the final forward and first backward states.
    fn sequence_posterior(&self, g: &mut Graph<T>, feats: &[Var], masks: Option<&[Var]>) -> Result<GaussianVar> {
        let p = &self.params;
        let fwd = recurrent_unroll(g, p, &self.v_fwd, feats, None, masks)?;
        let bwd = recurrent_unroll(g, p, &self.v_bwd, feats, None, masks)?;
        let summary = g.concat(&[fwd[fwd.len() - 1], bwd[0]]);
        let e = self.v_encoder.forward(g, p, summary)?;
        self.v_head.forward(g, p, e)
    }
}

impl<T: Scalar> DynamicalVae<T> for Dsae<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::Dsae
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
        let masks = batch.mask_inputs(g);
        let xs = batch.inputs(g);
        let feats = xs
            .iter()
            .map(|&x| self.frame_features.forward(g, p, x))
            .collect::<Result<Vec<_>>>()?;
        let v_post = self.sequence_posterior(g, &feats, masks.as_deref())?;
        let eps = noise.normal(b, self.cfg.v_dim);
        let v = graph_reparam(g, v_post, eps);

        let z_in = feats
            .iter()
            .map(|&f| {
                let vf = g.concat(&[v, f]);
                self.z_input.forward(g, p, vf)
            })
            .collect::<Result<Vec<_>>>()?;
        let bi = bidirectional_unroll(g, p, &self.z_fwd, &self.z_bwd, &z_in, masks.as_deref())?;
        let comb = recurrent_unroll(g, p, &self.z_combiner, &bi, None, None)?;

        let mut prior_state = self.prior_cell.initial_state(g, b);
        let mut steps: Vec<StepTerms> = Vec::with_capacity(xs.len());
        for &c in &comb {
            let z_prev = steps.last().map(|s| s.z);
            let prior = self.prior_at(g, &mut prior_state, z_prev)?;
            let posterior = self.z_head.forward(g, p, c)?;
            let eps = noise.normal(b, self.cfg.z_dim);
            let z = draw_latent(g, posterior, eps, forced, steps.len());
            let obs = self.decode_at(g, z, v)?;
            steps.push(StepTerms {
                posterior,
                kl: KlTerm::Prior(prior),
                z,
                obs,
            });
        }
        Ok(SequencePass {
            steps,
            sequence_posterior: Some(v_post),
        })
    }

    fn start_generation(&self, g: &mut Graph<T>, batch: usize, noise: &mut Noise<'_>) -> Result<StepContext> {
        let mut ctx = StepContext::new(g, batch, self.cfg.x_dim, self.cfg.z_dim);
        ctx.states.push(self.prior_cell.initial_state(g, batch));
        let prior = standard_normal_var(g, batch, self.cfg.v_dim);
        let eps = noise.normal(batch, self.cfg.v_dim);
        ctx.sequence_latent = Some(graph_reparam(g, prior, eps));
        Ok(ctx)
    }

    fn prior_step(&self, g: &mut Graph<T>, ctx: &mut StepContext, _noise: &mut Noise<'_>) -> Result<GaussianVar> {
        let z_prev = (ctx.t > 0).then_some(ctx.prev_z);
        let mut state = ctx.states[0];
        let prior = self.prior_at(g, &mut state, z_prev)?;
        ctx.states[0] = state;
        Ok(prior)
    }

    fn decode_step(&self, g: &mut Graph<T>, ctx: &mut StepContext, z: Var) -> Result<ObsVar> {
        let v = ctx.sequence_latent.expect("sequence latent drawn at start");
        self.decode_at(g, z, v)
    }
}
