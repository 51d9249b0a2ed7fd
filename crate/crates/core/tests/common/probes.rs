//! Helpers for structural probes: run a model with its latents forced and
//! compare outputs under input perturbations.

use dvae::model::{posterior_given, DynamicalVae, Noise, SequenceBatch};
use dvae::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Posterior parameters at every step with the latent history forced to
/// `latents`.
pub fn forced_posteriors(model: &dyn DynamicalVae<f64>, batch: &SequenceBatch<f64>, latents: &[Tensor<f64>]) -> Vec<Vec<f64>> {
    posterior_given(model, batch, latents)
        .unwrap()
        .into_iter()
        .map(|p| p.mean.as_slice().iter().chain(p.log_var.as_slice()).copied().collect())
        .collect()
}

/// Observation means at every step with the latents forced to `latents`.
pub fn forced_observations(model: &dyn DynamicalVae<f64>, batch: &SequenceBatch<f64>, latents: &[Tensor<f64>]) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let forced: Vec<_> = latents.iter().map(|z| g.input(z.clone())).collect();
    let pass = model.run_with(&mut g, batch, &mut Noise::Zero, Some(&forced)).unwrap();
    pass.steps.iter().map(|s| s.obs.mean(&g).into_vec()).collect()
}

pub fn random_latents(seed: u64, t: usize, b: usize, l: usize) -> Vec<Tensor<f64>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..t).map(|_| Tensor::from_fn(b, l, |_, _| r.sample(StandardNormal))).collect()
}

pub fn perturb_frame(batch: &SequenceBatch<f64>, t: usize, delta: f64) -> SequenceBatch<f64> {
    let mut frames = batch.frames().to_vec();
    frames[t] = frames[t].map(|v| v * (1.0 + delta) + delta);
    SequenceBatch::new(frames, batch.lengths().to_vec()).unwrap()
}
