//! A deep Kalman filter whose transition and emission collapse to linear
//! Gaussian maps, and the LDS it is equivalent to.

use dvae::blocks::MlpSpec;
use dvae::data::synth_lds_dataset;
use dvae::graph::Activation::{Identity, Relu, Sigmoid, Softplus, Tanh};
use dvae::lds::{lds_log_marginal, LdsInit, LdsParams};
use dvae::model::{elbo, DynamicalVae, ElboOptions, Noise, ObservationKind, SequenceBatch};
use dvae::models::{Dkf, DkfConfig};
use dvae::params::ParamSet;
use dvae::training::{adaptive_moment_step, AdamConfig, AdamState};
use dvae::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TRANSITION: f64 = 0.9;
pub const EMISSION: f64 = 1.0;
pub const OBS_VAR: f64 = 0.5;
/// Pre-softplus bias giving the transition variance.
pub const VAR_BIAS: f64 = -0.5;

pub fn set(p: &mut ParamSet<f64>, name: &str, values: &[f64]) {
    let id = p.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let t = p.get_mut(id);
    assert_eq!(t.len(), values.len(), "{name}");
    t.as_mut_slice().copy_from_slice(values);
}

pub fn linear_dkf() -> Dkf<f64> {
    let cfg = DkfConfig {
        x_dim: 1,
        z_dim: 1,
        rnn_hidden: 16,
        observation: ObservationKind::Gaussian,
        gate: MlpSpec::new(&[(1, Relu), (1, Sigmoid)]),
        nonlinear_mean: MlpSpec::new(&[(1, Relu), (1, Identity)]),
        linear_mean: MlpSpec::new(&[(1, Identity)]),
        variance: MlpSpec::new(&[(1, Softplus)]),
        decoder: MlpSpec::new(&[(1, Identity)]),
        frame_features: MlpSpec::new(&[(16, Tanh)]),
        latent_features: MlpSpec::new(&[(16, Tanh)]),
        combiner: MlpSpec::new(&[(16, Tanh)]),
    };
    let mut model = Dkf::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let p = model.params_mut();
    // Gate closed: the mean is the linear branch alone.
    set(p, "prior.gate.1.w", &[0.0]);
    set(p, "prior.gate.1.b", &[-1000.0]);
    set(p, "prior.lin.0.w", &[TRANSITION]);
    set(p, "prior.lin.0.b", &[0.0]);
    // Constant variance, independent of the previous state.
    set(p, "prior.var.0.w", &[0.0]);
    set(p, "prior.var.0.b", &[VAR_BIAS]);
    set(p, "dec.0.w", &[1.0]);
    set(p, "dec.0.b", &[0.0]);
    set(p, "dec.head.w", &[EMISSION, 0.0]);
    set(p, "dec.head.b", &[0.0, OBS_VAR.ln()]);
    model
}

pub fn equivalent_lds() -> LdsParams<f64> {
    let state_var = (1.0 + VAR_BIAS.exp()).ln() + 1e-10;
    LdsParams::new(
        Tensor::from_vec(1, 1, vec![TRANSITION]).unwrap(),
        Tensor::from_vec(1, 1, vec![EMISSION]).unwrap(),
        &[state_var],
        &[OBS_VAR],
    )
    .unwrap()
}

pub fn as_batch(seqs: &[Vec<Vec<f64>>]) -> SequenceBatch<f64> {
    SequenceBatch::from_sequences(seqs).unwrap()
}

/// Fits only the encoder so the bound is reasonably tight.
pub fn fit_encoder(model: &mut Dkf<f64>, data: &[Vec<Vec<f64>>], steps: usize) {
    let mask: Vec<bool> = model.params().entries().iter().map(|e| e.group == "encoder").collect();
    let mut adam = AdamState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = as_batch(data);
    for _ in 0..steps {
        let mut g = Graph::new();
        let eval = elbo(&*model, &mut g, &batch, ElboOptions::default(), &mut Noise::Rng(&mut rng)).unwrap();
        let grads = g.backward(eval.total);
        let mut dense = grads.dense(model.params());
        for d in dense.iter_mut() {
            d.scale_assign(-1.0);
        }
        adaptive_moment_step(model.params_mut(), &dense, &mut adam, 1e-2, &AdamConfig::default(), Some(&mask)).unwrap();
    }
}

/// Monte-Carlo ELBO of one sequence with its standard error, from `chunks`
/// independent means of `per_chunk` samples each.
pub fn elbo_estimate(model: &Dkf<f64>, seq: &[Vec<f64>], chunks: usize, per_chunk: usize, seed: u64) -> (f64, f64) {
    let batch = as_batch(&vec![seq.to_vec(); per_chunk]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<f64> = (0..chunks)
        .map(|_| {
            let mut g = Graph::new();
            let eval = elbo(model, &mut g, &batch, ElboOptions::default(), &mut Noise::Rng(&mut rng)).unwrap();
            eval.breakdown.per_sequence()
        })
        .collect();
    let n = chunks as f64;
    let mean = means.iter().sum::<f64>() / n;
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// One sequence's exact log-marginal against the Monte-Carlo ELBO.
pub struct BoundRow {
    pub exact: f64,
    pub estimate: f64,
    pub std_error: f64,
}

/// Draws `n` LDS sequences, fits the encoder, and estimates each ELBO from
/// 100 chunks of 100 samples.
pub fn bound_rows(n: usize, len: usize) -> Vec<BoundRow> {
    let lds = equivalent_lds();
    let init = LdsInit::from_state_noise(&lds);
    let data = synth_lds_dataset(&lds, n, len, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut model = linear_dkf();
    fit_encoder(&mut model, &data.observations, 300);
    data.observations
        .iter()
        .enumerate()
        .map(|(i, seq)| {
            let exact = lds_log_marginal(&lds, &init, seq, None).unwrap();
            let (estimate, std_error) = elbo_estimate(&model, seq, 100, 100, 10 + i as u64);
            BoundRow { exact, estimate, std_error }
        })
        .collect()
}
