use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::blocks::{
    bidirectional_unroll, recurrent_unroll, Direction, GaussianHead, Mlp, MlpSpec, RecurrentCell, RecurrentCellConfig,
};
use crate::distributions::{graph_reparam, standard_normal_var, GaussianVar};
use crate::error::{check_dim, DvaeError, Result};
use crate::graph::{Activation::Tanh, Graph, Var};
use crate::model::{
    draw_latent,
    generate_stepwise, DynamicalVae, Generation, KlTerm, ModelKind, Noise, ObsVar, ObservationHead, ObservationKind,
    SequenceBatch, SequencePass, StepContext, StepTerms,
};
use crate::params::ParamSet;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RvaeConfig {
    pub x_dim: usize,
    pub z_dim: usize,
    pub rnn_hidden: usize,
    pub observation: ObservationKind,
    pub causal: bool,
    pub latent_features: MlpSpec,
    pub decoder_output: MlpSpec,
    pub encoder_latent_features: MlpSpec,
    pub encoder_frame_features: MlpSpec,
    pub encoder_output: MlpSpec,
}

impl RvaeConfig {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        Self {
            x_dim: cfg.x_dim,
            z_dim: cfg.z_dim,
            rnn_hidden: cfg.rnn_hidden,
            observation: cfg.observation,
            causal: cfg.kind != crate::model::ModelKind::RvaeNoncausal,
            latent_features: cfg.mlp(&[(32, Tanh), (64, Tanh)]),
            decoder_output: cfg.mlp(&[(256, Tanh)]),
            encoder_latent_features: cfg.mlp(&[(32, Tanh), (64, Tanh)]),
            encoder_frame_features: cfg.mlp(&[(256, Tanh)]),
            encoder_output: cfg.mlp(&[(64, Tanh), (32, Tanh)]),
        }
    }
}

/// Recurrent VAE: i.i.d. standard-normal latents with all temporal structure
/// carried by a recurrence over `z` in the decoder (forward for the causal
/// variant, bidirectional for the non-causal one). Inference combines a
/// forward recurrence over `z_{1:t-1}` with a backward recurrence over
/// `x_{t:T}` (plus a forward one over `x_{1:t}` when non-causal).
pub struct Rvae<T: Scalar> {
    cfg: RvaeConfig,
    params: ParamSet<T>,
    dec_z: Mlp,
    dec_fwd: RecurrentCell,
    dec_bwd: Option<RecurrentCell>,
    dec_out: Mlp,
    dec_head: ObservationHead,
    enc_z: Mlp,
    enc_z_cell: RecurrentCell,
    enc_x: Mlp,
    enc_x_bwd: RecurrentCell,
    enc_x_fwd: Option<RecurrentCell>,
    enc_out: Mlp,
    enc_head: GaussianHead,
}

impl<T: Scalar> Rvae<T> {
    pub fn new<R: Rng + ?Sized>(cfg: RvaeConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamSet::new();
        let p = &mut params;
        let h = cfg.rnn_hidden;
        let lstm = |i, d| RecurrentCellConfig::lstm(i, h, d);
        let dec_z = Mlp::new(p, rng, "dec.z", "decoder", cfg.z_dim, &cfg.latent_features)?;
        let dec_fwd = RecurrentCell::new(p, rng, "dec.rnn.fwd", "decoder", lstm(dec_z.out_dim(), Direction::Forward));
        let dec_bwd = (!cfg.causal)
            .then(|| RecurrentCell::new(p, rng, "dec.rnn.bwd", "decoder", lstm(dec_z.out_dim(), Direction::Backward)));
        let dec_in = if cfg.causal { h } else { 2 * h };
        let dec_out = Mlp::new(p, rng, "dec.out", "decoder", dec_in, &cfg.decoder_output)?;
        let dec_head = ObservationHead::new(p, rng, "dec.head", "decoder", dec_out.out_dim(), cfg.x_dim, cfg.observation);
        let enc_z = Mlp::new(p, rng, "enc.z", "encoder", cfg.z_dim, &cfg.encoder_latent_features)?;
        let enc_z_cell = RecurrentCell::new(p, rng, "enc.rnn.z", "encoder", lstm(enc_z.out_dim(), Direction::Forward));
        let enc_x = Mlp::new(p, rng, "enc.x", "encoder", cfg.x_dim, &cfg.encoder_frame_features)?;
        let enc_x_bwd = RecurrentCell::new(p, rng, "enc.rnn.x.bwd", "encoder", lstm(enc_x.out_dim(), Direction::Backward));
        let enc_x_fwd = (!cfg.causal)
            .then(|| RecurrentCell::new(p, rng, "enc.rnn.x.fwd", "encoder", lstm(enc_x.out_dim(), Direction::Forward)));
        let enc_in = if cfg.causal { 2 * h } else { 3 * h };
        let enc_out = Mlp::new(p, rng, "enc.out", "encoder", enc_in, &cfg.encoder_output)?;
        let enc_head = GaussianHead::new(p, rng, "enc.head", "encoder", enc_out.out_dim(), cfg.z_dim);
        Ok(Self {
            cfg,
            params,
            dec_z,
            dec_fwd,
            dec_bwd,
            dec_out,
            dec_head,
            enc_z,
            enc_z_cell,
            enc_x,
            enc_x_bwd,
            enc_x_fwd,
            enc_out,
            enc_head,
        })
    }

    pub fn config(&self) -> &RvaeConfig {
        &self.cfg
    }

    pub fn is_causal(&self) -> bool {
        self.cfg.causal
    }

    /// Observation parameters for every frame from a whole latent sequence.
    pub fn decode_sequence(&self, g: &mut Graph<T>, zs: &[Var], masks: Option<&[Var]>) -> Result<Vec<ObsVar>> {
        let p = &self.params;
        let feats = zs
            .iter()
            .map(|&z| self.dec_z.forward(g, p, z))
            .collect::<Result<Vec<_>>>()?;
        let hs = match &self.dec_bwd {
            None => recurrent_unroll(g, p, &self.dec_fwd, &feats, None, None)?,
            Some(bwd) => bidirectional_unroll(g, p, &self.dec_fwd, bwd, &feats, masks)?,
        };
        hs.into_iter()
            .map(|h| {
                let d = self.dec_out.forward(g, p, h)?;
                self.dec_head.forward(g, p, d)
            })
            .collect()
    }
}

impl<T: Scalar> DynamicalVae<T> for Rvae<T> {
    fn kind(&self) -> ModelKind {
        if self.cfg.causal {
            ModelKind::RvaeCausal
        } else {
            ModelKind::RvaeNoncausal
        }
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
        let fx = xs
            .iter()
            .map(|&x| self.enc_x.forward(g, p, x))
            .collect::<Result<Vec<_>>>()?;
        let back = recurrent_unroll(g, p, &self.enc_x_bwd, &fx, None, masks.as_deref())?;
        let fwd = match &self.enc_x_fwd {
            Some(cell) => Some(recurrent_unroll(g, p, cell, &fx, None, None)?),
            None => None,
        };
        let mut z_state = self.enc_z_cell.initial_state(g, b);
        let mut posts = Vec::with_capacity(xs.len());
        let mut zs: Vec<Var> = Vec::with_capacity(xs.len());
        for t in 0..xs.len() {
            if let Some(&z_prev) = zs.last() {
                let f = self.enc_z.forward(g, p, z_prev)?;
                z_state = self.enc_z_cell.step(g, p, f, &z_state)?;
            }
            let input = match &fwd {
                Some(fw) => g.concat(&[z_state.h, fw[t], back[t]]),
                None => g.concat(&[z_state.h, back[t]]),
            };
            let e = self.enc_out.forward(g, p, input)?;
            let posterior = self.enc_head.forward(g, p, e)?;
            let eps = noise.normal(b, self.cfg.z_dim);
            zs.push(draw_latent(g, posterior, eps, forced, t));
            posts.push(posterior);
        }
        let obs = self.decode_sequence(g, &zs, masks.as_deref())?;
        let steps = posts
            .into_iter()
            .zip(zs)
            .zip(obs)
            .map(|((posterior, z), obs)| StepTerms {
                posterior,
                kl: KlTerm::StandardNormal,
                z,
                obs,
            })
            .collect();
        Ok(SequencePass {
            steps,
            sequence_posterior: None,
        })
    }

    fn start_generation(&self, g: &mut Graph<T>, batch: usize, _noise: &mut Noise<'_>) -> Result<StepContext> {
        let mut ctx = StepContext::new(g, batch, self.cfg.x_dim, self.cfg.z_dim);
        ctx.states.push(self.dec_fwd.initial_state(g, batch));
        Ok(ctx)
    }

    fn prior_step(&self, g: &mut Graph<T>, ctx: &mut StepContext, _noise: &mut Noise<'_>) -> Result<GaussianVar> {
        Ok(standard_normal_var(g, ctx.batch, self.cfg.z_dim))
    }

    fn decode_step(&self, g: &mut Graph<T>, ctx: &mut StepContext, z: Var) -> Result<ObsVar> {
        if !self.cfg.causal {
            return Err(DvaeError::Contract(
                "non-causal RVAE decodes whole latent sequences; incremental decoding is undefined".into(),
            ));
        }
        let p = &self.params;
        let f = self.dec_z.forward(g, p, z)?;
        ctx.states[0] = self.dec_fwd.step(g, p, f, &ctx.states[0])?;
        let d = self.dec_out.forward(g, p, ctx.states[0].h)?;
        self.dec_head.forward(g, p, d)
    }

    fn generate(
        &self,
        len: usize,
        batch: usize,
        noise: &mut Noise<'_>,
        prefix: Option<&SequenceBatch<T>>,
    ) -> Result<Generation<T>> {
        if self.cfg.causal {
            return generate_stepwise(self, len, batch, noise, prefix);
        }
        if len == 0 || batch == 0 {
            return Err(DvaeError::EmptyInput("generation length and batch must be >= 1".into()));
        }
        if let Some(pf) = prefix {
            check_dim("prefix batch size", batch, pf.batch_size())?;
            check_dim("prefix feature size", self.cfg.x_dim, pf.feature_dim())?;
        }
        let mut g = Graph::new();
        let zs: Vec<Var> = (0..len)
            .map(|_| {
                let prior = standard_normal_var(&mut g, batch, self.cfg.z_dim);
                let eps = noise.normal(batch, self.cfg.z_dim);
                graph_reparam(&mut g, prior, eps)
            })
            .collect();
        let obs = self.decode_sequence(&mut g, &zs, None)?;
        let frames = obs
            .iter()
            .enumerate()
            .map(|(t, o)| match prefix {
                Some(pf) if t < pf.num_frames() => pf.frame(t).clone(),
                _ => o.sample(&g, noise),
            })
            .collect();
        Ok(Generation {
            frames: SequenceBatch::new(frames, vec![len; batch])?,
            latents: zs.iter().map(|&z| g.value(z).clone()).collect(),
        })
    }
}
