use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::blocks::{GaussianHead, Mlp, MlpSpec};
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
pub struct VaeConfig {
    pub x_dim: usize,
    pub z_dim: usize,
    pub observation: ObservationKind,
    pub encoder: MlpSpec,
    pub decoder: MlpSpec,
}

impl VaeConfig {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        Self {
            x_dim: cfg.x_dim,
            z_dim: cfg.z_dim,
            observation: cfg.observation,
            encoder: cfg.mlp(&[(256, Tanh), (128, Tanh)]),
            decoder: cfg.mlp(&[(128, Tanh), (256, Tanh)]),
        }
    }
}

/// Frame-wise static VAE: `z_t ~ N(0, I)` independently, `x_t` decoded from
/// `z_t` alone, `q(z_t | x_t)`.
pub struct Vae<T: Scalar> {
    cfg: VaeConfig,
    params: ParamSet<T>,
    encoder: Mlp,
    encoder_head: GaussianHead,
    decoder: Mlp,
    decoder_head: ObservationHead,
}

impl<T: Scalar> Vae<T> {
    pub fn new<R: Rng + ?Sized>(cfg: VaeConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamSet::new();
        let p = &mut params;
        let encoder = Mlp::new(p, rng, "enc", "encoder", cfg.x_dim, &cfg.encoder)?;
        let encoder_head = GaussianHead::new(p, rng, "enc.head", "encoder", encoder.out_dim(), cfg.z_dim);
        let decoder = Mlp::new(p, rng, "dec", "decoder", cfg.z_dim, &cfg.decoder)?;
        let decoder_head =
            ObservationHead::new(p, rng, "dec.head", "decoder", decoder.out_dim(), cfg.x_dim, cfg.observation);
        Ok(Self {
            cfg,
            params,
            encoder,
            encoder_head,
            decoder,
            decoder_head,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    pub fn encoder_head(&self) -> &GaussianHead {
        &self.encoder_head
    }

    fn decode(&self, g: &mut Graph<T>, z: Var) -> Result<ObsVar> {
        let h = self.decoder.forward(g, &self.params, z)?;
        self.decoder_head.forward(g, &self.params, h)
    }
}

impl<T: Scalar> DynamicalVae<T> for Vae<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::Vae
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
        let xs = batch.inputs(g);
        let mut steps = Vec::with_capacity(xs.len());
        for &x in &xs {
            let h = self.encoder.forward(g, &self.params, x)?;
            let posterior = self.encoder_head.forward(g, &self.params, h)?;
            let eps = noise.normal(batch.batch_size(), self.cfg.z_dim);
            let z = draw_latent(g, posterior, eps, forced, steps.len());
            let obs = self.decode(g, z)?;
            steps.push(StepTerms {
                posterior,
                kl: KlTerm::StandardNormal,
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
        Ok(StepContext::new(g, batch, self.cfg.x_dim, self.cfg.z_dim))
    }

    fn prior_step(&self, g: &mut Graph<T>, ctx: &mut StepContext, _noise: &mut Noise<'_>) -> Result<GaussianVar> {
        Ok(standard_normal_var(g, ctx.batch, self.cfg.z_dim))
    }

    fn decode_step(&self, g: &mut Graph<T>, _ctx: &mut StepContext, z: Var) -> Result<ObsVar> {
        self.decode(g, z)
    }
}
