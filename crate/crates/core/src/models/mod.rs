//! The eight model families behind the shared [`DynamicalVae`] contract.

mod dkf;
mod dsae;
mod kvae;
mod rvae;
mod srnn;
mod storn;
mod vae;
mod vrnn;

pub use dkf::{Dkf, DkfConfig};
pub use dsae::{Dsae, DsaeConfig};
pub use kvae::{Kvae, KvaeConfig, LDS_GROUP};
pub use rvae::{Rvae, RvaeConfig};
pub use srnn::{Srnn, SrnnConfig};
pub use storn::{Storn, StornConfig};
pub use vae::{Vae, VaeConfig};
pub use vrnn::{Vrnn, VrnnConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::MlpSpec;
use crate::error::{DvaeError, Result};
use crate::graph::Activation;
use crate::model::{DynamicalVae, ModelKind, ObservationKind};
use crate::scalar::Scalar;

/// Knobs specific to the Kalman VAE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KvaeSettings {
    /// Dimension of the per-frame features `a_t`.
    pub a_dim: usize,
    /// Dimension of the linear-dynamics state.
    pub state_dim: usize,
    /// Number of parameter sets in the bank.
    pub components: usize,
    pub alpha_hidden: usize,
    /// Standard deviation of the random input/emission matrices at init.
    pub bank_scale: f64,
    pub state_noise: f64,
    pub emission_noise: f64,
    pub two_stage: bool,
    /// Epochs of the first stage (dynamics frozen).
    pub stage_one_epochs: usize,
}

impl Default for KvaeSettings {
    fn default() -> Self {
        Self {
            a_dim: 32,
            state_dim: 8,
            components: 3,
            alpha_hidden: 50,
            bank_scale: 0.05,
            state_noise: 0.1,
            emission_noise: 0.01,
            two_stage: true,
            stage_one_epochs: 20,
        }
    }
}

/// Architecture description shared by all models. Layer widths follow the
/// reference speech setup unless `width` is set, in which case every dense
/// and recurrent width becomes `width` (used for micro instances).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default = "default_x_dim")]
    pub x_dim: usize,
    #[serde(default = "default_z_dim")]
    pub z_dim: usize,
    #[serde(default = "default_rnn_hidden")]
    pub rnn_hidden: usize,
    #[serde(default)]
    pub observation: ObservationKind,
    #[serde(default)]
    pub width: Option<usize>,
    /// SRNN: replace the backward inference recurrence by a causal filter.
    #[serde(default)]
    pub srnn_filtering: bool,
    /// VRNN: add a backward recurrence over frames to the encoder.
    #[serde(default)]
    pub vrnn_backward_inference: bool,
    #[serde(default = "default_dsae_v_dim")]
    pub dsae_v_dim: usize,
    #[serde(default = "default_dsae_hidden")]
    pub dsae_hidden: usize,
    #[serde(default)]
    pub kvae: KvaeSettings,
}

fn default_x_dim() -> usize {
    257
}
fn default_z_dim() -> usize {
    16
}
fn default_rnn_hidden() -> usize {
    128
}
fn default_dsae_v_dim() -> usize {
    16
}
fn default_dsae_hidden() -> usize {
    32
}

impl ModelConfig {
    /// Reference speech configuration (`F = 257`, `L = 16`, hidden 128).
    pub fn speech(kind: ModelKind) -> Self {
        Self {
            kind,
            x_dim: default_x_dim(),
            z_dim: default_z_dim(),
            rnn_hidden: default_rnn_hidden(),
            observation: ObservationKind::PowerSpectrum,
            width: None,
            srnn_filtering: false,
            vrnn_backward_inference: false,
            dsae_v_dim: default_dsae_v_dim(),
            dsae_hidden: default_dsae_hidden(),
            kvae: KvaeSettings::default(),
        }
    }

    /// Tiny instance with every width set to `width`.
    pub fn micro(kind: ModelKind, x_dim: usize, z_dim: usize, width: usize) -> Self {
        Self {
            x_dim,
            z_dim,
            rnn_hidden: width,
            width: Some(width),
            dsae_v_dim: z_dim,
            dsae_hidden: width,
            kvae: KvaeSettings {
                a_dim: z_dim,
                state_dim: z_dim,
                components: 2,
                alpha_hidden: width,
                ..KvaeSettings::default()
            },
            ..Self::speech(kind)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("x_dim", self.x_dim),
            ("z_dim", self.z_dim),
            ("rnn_hidden", self.rnn_hidden),
            ("dsae_v_dim", self.dsae_v_dim),
            ("dsae_hidden", self.dsae_hidden),
            ("kvae.a_dim", self.kvae.a_dim),
            ("kvae.state_dim", self.kvae.state_dim),
            ("kvae.components", self.kvae.components),
            ("kvae.alpha_hidden", self.kvae.alpha_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(DvaeError::Config(format!("{name} must be >= 1")));
        }
        if self.width == Some(0) {
            return Err(DvaeError::Config("width must be >= 1".into()));
        }
        if !(self.kvae.state_noise > 0.0 && self.kvae.emission_noise > 0.0) {
            return Err(DvaeError::Config("KVAE noise variances must be positive".into()));
        }
        Ok(())
    }

    /// A dense-layer width, overridden by `width` when set.
    pub fn dense(&self, n: usize) -> usize {
        self.width.unwrap_or(n)
    }

    /// MLP spec with each width passed through [`dense`](Self::dense).
    pub fn mlp(&self, layers: &[(usize, Activation)]) -> MlpSpec {
        let scaled: Vec<(usize, Activation)> = layers.iter().map(|&(n, a)| (self.dense(n), a)).collect();
        MlpSpec::new(&scaled)
    }
}

/// Builds the model described by `cfg`, initializing parameters from `seed`.
pub fn build_model<T: Scalar + 'static>(cfg: &ModelConfig, seed: u64) -> Result<Box<dyn DynamicalVae<T>>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match cfg.kind {
        ModelKind::Vae => Box::new(Vae::new(VaeConfig::from_model(cfg), &mut rng)?),
        ModelKind::Dkf => Box::new(Dkf::new(DkfConfig::from_model(cfg), &mut rng)?),
        ModelKind::Kvae => Box::new(Kvae::new(KvaeConfig::from_model(cfg), &mut rng)?),
        ModelKind::Storn => Box::new(Storn::new(StornConfig::from_model(cfg), &mut rng)?),
        ModelKind::Vrnn => Box::new(Vrnn::new(VrnnConfig::from_model(cfg), &mut rng)?),
        ModelKind::Srnn => Box::new(Srnn::new(SrnnConfig::from_model(cfg), &mut rng)?),
        ModelKind::RvaeCausal | ModelKind::RvaeNoncausal => Box::new(Rvae::new(RvaeConfig::from_model(cfg), &mut rng)?),
        ModelKind::Dsae => Box::new(Dsae::new(DsaeConfig::from_model(cfg), &mut rng)?),
    })
}
