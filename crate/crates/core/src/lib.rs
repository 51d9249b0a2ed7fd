//! Dynamical variational autoencoders for sequential data: a shared
//! autodiff core, seven dynamical VAE families plus a static baseline, exact
//! linear-Gaussian state-space inference, and a speech analysis/resynthesis
//! pipeline (STFT, training, evaluation).

pub mod blocks;
pub mod data;
pub mod distributions;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod lds;
pub mod linalg;
pub mod model;
pub mod models;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{DvaeError, Result};
pub use graph::{Activation, Gradients, Graph, Var};
pub use model::{
    elbo, DynamicalVae, ElboBreakdown, ElboOptions, ModelKind, Noise, ObservationKind, SequenceBatch,
};
pub use models::{build_model, ModelConfig};
pub use params::{ParamId, ParamSet};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamSet32 = ParamSet<f32>;
pub type ParamSet64 = ParamSet<f64>;
