#![allow(dead_code)]

pub mod blocks;
pub mod linear_dkf;
pub mod oracles;
pub mod probes;

use dvae::model::{elbo, DynamicalVae, ElboOptions, ModelKind, Noise, ObservationKind, SequenceBatch};
use dvae::models::ModelConfig;
use dvae::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Micro instance used by structural and gradient tests: F = 3, L = 2, every
/// hidden width 4.
pub fn micro(kind: ModelKind) -> ModelConfig {
    ModelConfig::micro(kind, 3, 2, 4)
}

pub fn micro_with(kind: ModelKind, observation: ObservationKind) -> ModelConfig {
    ModelConfig {
        observation,
        ..micro(kind)
    }
}

/// Random frames: positive values for power spectra, real values otherwise.
pub fn random_sequences(rng: &mut impl Rng, b: usize, t: usize, f: usize, kind: ObservationKind) -> Vec<Vec<Vec<f64>>> {
    (0..b)
        .map(|_| {
            (0..t)
                .map(|_| {
                    (0..f)
                        .map(|_| {
                            let n: f64 = rng.sample(StandardNormal);
                            match kind {
                                ObservationKind::PowerSpectrum => (0.7 * n).exp(),
                                ObservationKind::Gaussian => n,
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn random_batch(seed: u64, b: usize, t: usize, f: usize, kind: ObservationKind) -> SequenceBatch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SequenceBatch::from_sequences(&random_sequences(&mut rng, b, t, f, kind)).unwrap()
}

/// ELBO total with the noise stream fixed by `seed`.
pub fn elbo_at(model: &dyn DynamicalVae<f64>, batch: &SequenceBatch<f64>, seed: u64) -> f64 {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    elbo(model, &mut g, batch, ElboOptions::default(), &mut Noise::Rng(&mut rng))
        .unwrap()
        .breakdown
        .total
}

/// Analytic ELBO gradient, flattened in parameter order.
pub fn elbo_gradient(model: &dyn DynamicalVae<f64>, batch: &SequenceBatch<f64>, seed: u64) -> Vec<f64> {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = elbo(model, &mut g, batch, ElboOptions::default(), &mut Noise::Rng(&mut rng)).unwrap();
    let grads = g.backward(eval.total);
    grads
        .dense(model.params())
        .into_iter()
        .flat_map(|t| t.into_vec())
        .collect()
}

/// Largest violation ratio `|a − n| / (rtol·max(|a|,|n|) + 1e-7)` of the
/// analytic gradient against central differences; ≤ 1 means the check passes.
pub fn gradient_check(model: &mut dyn DynamicalVae<f64>, batch: &SequenceBatch<f64>, seed: u64, rtol: f64) -> f64 {
    let analytic = elbo_gradient(model, batch, seed);
    let base = model.params().flatten();
    assert_eq!(analytic.len(), base.len());
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let h = 1e-6 * base[i].abs().max(1.0);
        let mut p = base.clone();
        p[i] = base[i] + h;
        model.params_mut().assign_flat(&p);
        let up = elbo_at(model, batch, seed);
        p[i] = base[i] - h;
        model.params_mut().assign_flat(&p);
        let down = elbo_at(model, batch, seed);
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let ratio = (a - numeric).abs() / (rtol * a.abs().max(numeric.abs()) + 1e-7);
        worst = worst.max(ratio);
    }
    model.params_mut().assign_flat(&base);
    worst
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Moves every parameter by `scale`-sized Gaussian noise, so that checks run
/// at a generic point (zero biases on zero inputs sit on ReLU kinks).
pub fn jitter(model: &mut dyn DynamicalVae<f64>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p: Vec<f64> = model
        .params()
        .flatten()
        .into_iter()
        .map(|v| v + scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    model.params_mut().assign_flat(&p);
}
