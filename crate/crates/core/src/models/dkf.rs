use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::blocks::{recurrent_unroll, Direction, GaussianHead, Linear, Mlp, MlpSpec, RecurrentCell, RecurrentCellConfig};
use crate::distributions::{GaussianVar, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::error::Result;
use crate::graph::{
    Activation::{Identity, Relu, Sigmoid, Softplus, Tanh},
    Graph, Var,
};
use crate::model::{
    draw_latent,
    DynamicalVae, KlTerm, ModelKind, Noise, ObsVar, ObservationHead, ObservationKind, SequenceBatch, SequencePass,
    StepContext, StepTerms,
};
use crate::params::ParamSet;
use crate::scalar::Scalar;

/// Added to the transition variance before taking its log.
const VARIANCE_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DkfConfig {
    pub x_dim: usize,
    pub z_dim: usize,
    pub rnn_hidden: usize,
    pub observation: ObservationKind,
    /// Gate `ν` of the transition; must end in `z_dim` units.
    pub gate: MlpSpec,
    pub nonlinear_mean: MlpSpec,
    pub linear_mean: MlpSpec,
    /// Applied to `ReLU(nonlinear mean)`; its output is the variance.
    pub variance: MlpSpec,
    pub decoder: MlpSpec,
    /// Frame features fed to the backward encoder recurrence.
    pub frame_features: MlpSpec,
    /// Features of `z_{t-1}` in the combiner, projected to the hidden size.
    pub latent_features: MlpSpec,
    pub combiner: MlpSpec,
}

impl DkfConfig {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        let l = cfg.z_dim;
        Self {
            x_dim: cfg.x_dim,
            z_dim: l,
            rnn_hidden: cfg.rnn_hidden,
            observation: cfg.observation,
            gate: MlpSpec::new(&[(l, Relu), (l, Sigmoid)]),
            nonlinear_mean: MlpSpec::new(&[(l, Relu), (l, Identity)]),
            linear_mean: MlpSpec::new(&[(l, Identity)]),
            variance: MlpSpec::new(&[(l, Softplus)]),
            decoder: cfg.mlp(&[(32, Tanh), (64, Tanh), (128, Tanh), (256, Tanh)]),
            frame_features: cfg.mlp(&[(256, Tanh)]),
            latent_features: cfg.mlp(&[(32, Tanh), (64, Tanh)]),
            combiner: cfg.mlp(&[(64, Tanh), (32, Tanh)]),
        }
    }
}

/// Gated transition blocks, exposed for inspection.
pub struct DkfTransition<'a> {
    pub gate: &'a Mlp,
    pub nonlinear_mean: &'a Mlp,
    pub linear_mean: &'a Mlp,
    pub variance: &'a Mlp,
}

/// Deep Kalman filter: first-order Markov latent chain with a gated
/// transition, frame-wise decoder, and the deep-Kalman-smoother encoder
/// `q(z_t | z_{t-1}, x_{t:T})`.
pub struct Dkf<T: Scalar> {
    cfg: DkfConfig,
    params: ParamSet<T>,
    gate: Mlp,
    nonlinear_mean: Mlp,
    linear_mean: Mlp,
    variance: Mlp,
    decoder: Mlp,
    decoder_head: ObservationHead,
    frame_features: Mlp,
    backward: RecurrentCell,
    latent_features: Mlp,
    latent_projection: Linear,
    combiner: Mlp,
    encoder_head: GaussianHead,
}

impl<T: Scalar> Dkf<T> {
    pub fn new<R: Rng + ?Sized>(cfg: DkfConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamSet::new();
        let p = &mut params;
        let l = cfg.z_dim;
        let gate = Mlp::new(p, rng, "prior.gate", "prior", l, &cfg.gate)?;
        let nonlinear_mean = Mlp::new(p, rng, "prior.nonlin", "prior", l, &cfg.nonlinear_mean)?;
        let linear_mean = Mlp::new(p, rng, "prior.lin", "prior", l, &cfg.linear_mean)?;
        let variance = Mlp::new(p, rng, "prior.var", "prior", nonlinear_mean.out_dim(), &cfg.variance)?;
        for (name, m) in [("gate", &gate), ("nonlinear mean", &nonlinear_mean), ("linear mean", &linear_mean), ("variance", &variance)] {
            crate::error::check_dim(&format!("transition {name} output"), l, m.out_dim())?;
        }
        let decoder = Mlp::new(p, rng, "dec", "decoder", l, &cfg.decoder)?;
        let decoder_head =
            ObservationHead::new(p, rng, "dec.head", "decoder", decoder.out_dim(), cfg.x_dim, cfg.observation);
        let frame_features = Mlp::new(p, rng, "enc.x", "encoder", cfg.x_dim, &cfg.frame_features)?;
        let backward = RecurrentCell::new(
            p,
            rng,
            "enc.rnn",
            "encoder",
            RecurrentCellConfig::lstm(frame_features.out_dim(), cfg.rnn_hidden, Direction::Backward),
        );
        let latent_features = Mlp::new(p, rng, "enc.z", "encoder", l, &cfg.latent_features)?;
        let latent_projection =
            Linear::new(p, rng, "enc.z.proj", "encoder", latent_features.out_dim(), cfg.rnn_hidden);
        let combiner = Mlp::new(p, rng, "enc.comb", "encoder", cfg.rnn_hidden, &cfg.combiner)?;
        let encoder_head = GaussianHead::new(p, rng, "enc.head", "encoder", combiner.out_dim(), l);
        Ok(Self {
            cfg,
            params,
            gate,
            nonlinear_mean,
            linear_mean,
            variance,
            decoder,
            decoder_head,
            frame_features,
            backward,
            latent_features,
            latent_projection,
            combiner,
            encoder_head,
        })
    }

    pub fn config(&self) -> &DkfConfig {
        &self.cfg
    }

    pub fn transition_blocks(&self) -> DkfTransition<'_> {
        DkfTransition {
            gate: &self.gate,
            nonlinear_mean: &self.nonlinear_mean,
            linear_mean: &self.linear_mean,
            variance: &self.variance,
        }
    }

    pub fn decoder(&self) -> (&Mlp, &ObservationHead) {
        (&self.decoder, &self.decoder_head)
    }

    /// `p(z_t | z_{t-1})`: mean `(1 − ν) ⊙ μ_lin + ν ⊙ μ_nonlin`, variance
    /// from a softplus layer over `ReLU(μ_nonlin)`.
    pub fn transition(&self, g: &mut Graph<T>, z_prev: Var) -> Result<GaussianVar> {
        let p = &self.params;
        let gate = self.gate.forward(g, p, z_prev)?;
        let nonlin = self.nonlinear_mean.forward(g, p, z_prev)?;
        let lin = self.linear_mean.forward(g, p, z_prev)?;
        let diff = g.sub(nonlin, lin);
        let gated = g.mul(gate, diff);
        let mean = g.add(lin, gated);
        let r = g.relu(nonlin);
        let var = self.variance.forward(g, p, r)?;
        let var = g.offset(var, T::lit(VARIANCE_FLOOR));
        let lv = g.log(var);
        let log_var = g.clamp(lv, T::lit(LOG_VAR_MIN), T::lit(LOG_VAR_MAX));
        Ok(GaussianVar { mean, log_var })
    }

    fn decode(&self, g: &mut Graph<T>, z: Var) -> Result<ObsVar> {
        let h = self.decoder.forward(g, &self.params, z)?;
        self.decoder_head.forward(g, &self.params, h)
    }
}

impl<T: Scalar> DynamicalVae<T> for Dkf<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::Dkf
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
        let back = recurrent_unroll(g, p, &self.backward, &feats, None, masks.as_deref())?;
        let mut z_prev = g.zeros(b, self.cfg.z_dim);
        let mut steps = Vec::with_capacity(xs.len());
        for &g_back in &back {
            let prior = self.transition(g, z_prev)?;
            let zf = self.latent_features.forward(g, p, z_prev)?;
            let zf = self.latent_projection.forward(g, p, zf);
            let sum = g.add(zf, g_back);
            let combined = g.scale(sum, T::lit(0.5));
            let h = self.combiner.forward(g, p, combined)?;
            let posterior = self.encoder_head.forward(g, p, h)?;
            let eps = noise.normal(b, self.cfg.z_dim);
            let z = draw_latent(g, posterior, eps, forced, steps.len());
            let obs = self.decode(g, z)?;
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
        Ok(StepContext::new(g, batch, self.cfg.x_dim, self.cfg.z_dim))
    }

    fn prior_step(&self, g: &mut Graph<T>, ctx: &mut StepContext, _noise: &mut Noise<'_>) -> Result<GaussianVar> {
        self.transition(g, ctx.prev_z)
    }

    fn decode_step(&self, g: &mut Graph<T>, _ctx: &mut StepContext, z: Var) -> Result<ObsVar> {
        self.decode(g, z)
    }
}
