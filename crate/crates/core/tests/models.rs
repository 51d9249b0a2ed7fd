mod common;

use common::probes::{forced_observations, forced_posteriors, perturb_frame, random_latents};
use common::{max_abs_diff, micro, micro_with, random_batch, random_sequences};
use dvae::distributions::{gaussian_log_prob, itakura_saito_log_prob, kl_diag_gaussians, GaussianParams, PowerSpecVarianceParams};
use dvae::lds::{lds_log_marginal, mix_bank, LdsInit, LdsParams};
use dvae::model::{
    elbo, posterior_sample_cascade, reconstruct, DynamicalVae, ElboOptions, KlTerm, ModelKind, Noise,
    ObsVar, ObservationKind, SequenceBatch,
};
use dvae::models::{build_model, Dkf, DkfConfig, Dsae, DsaeConfig, Kvae, KvaeConfig, ModelConfig, Rvae, RvaeConfig, Srnn, SrnnConfig, Storn, StornConfig, Vae, VaeConfig, Vrnn, VrnnConfig};
use dvae::{DvaeError, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const PS: ObservationKind = ObservationKind::PowerSpectrum;

fn build(kind: ModelKind) -> Box<dyn DynamicalVae<f64>> {
    build_model(&micro(kind), 7).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn zero_elbo(model: &dyn DynamicalVae<f64>, batch: &SequenceBatch<f64>, beta: f64) -> dvae::ElboBreakdown<f64> {
    let mut g = Graph::new();
    let opts = ElboOptions { n_samples: 1, beta };
    elbo(model, &mut g, batch, opts, &mut Noise::Zero).unwrap().breakdown
}

fn seeded_elbo(model: &dyn DynamicalVae<f64>, batch: &SequenceBatch<f64>, beta: f64, seed: u64) -> dvae::ElboBreakdown<f64> {
    let mut g = Graph::new();
    let mut r = rng(seed);
    let opts = ElboOptions { n_samples: 1, beta };
    elbo(model, &mut g, batch, opts, &mut Noise::Rng(&mut r)).unwrap().breakdown
}

fn analytic_kinds() -> impl Iterator<Item = ModelKind> {
    ModelKind::ALL.into_iter().filter(|k| *k != ModelKind::Kvae)
}

fn standard(dim: usize) -> GaussianParams<f64> {
    GaussianParams::standard(dim)
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

#[test]
fn every_model_yields_a_finite_consistent_bound() {
    for kind in ModelKind::ALL {
        for obs in [PS, ObservationKind::Gaussian] {
            let model = build_model::<f64>(&micro_with(kind, obs), 3).unwrap();
            let batch = random_batch(11, 2, 4, 3, obs);
            let b = seeded_elbo(model.as_ref(), &batch, 1.0, 5);
            assert!(b.total.is_finite(), "{kind} {obs:?}");
            assert_eq!(b.recon_per_t.len(), 4);
            assert_eq!(b.kl_per_t.len(), 4);
            assert!((b.total - (b.recon() - b.kl())).abs() < 1e-9 * b.total.abs().max(1.0));
            assert_eq!(b.valid_frames, 8);
        }
    }
}

#[test]
fn analytic_kl_terms_are_nonnegative() {
    for kind in analytic_kinds() {
        let model = build(kind);
        for seed in 0..3 {
            let batch = random_batch(seed, 3, 4, 3, PS);
            let b = seeded_elbo(model.as_ref(), &batch, 1.0, seed + 100);
            assert!(b.kl_per_t.iter().all(|&k| k >= -1e-12), "{kind}: {:?}", b.kl_per_t);
            assert!(b.sequence_kl >= -1e-12);
        }
    }
}

#[test]
fn bound_decreases_with_beta_and_reduces_to_reconstruction_at_zero() {
    for kind in analytic_kinds() {
        let model = build(kind);
        let batch = random_batch(1, 2, 3, 3, PS);
        let totals: Vec<f64> = [0.0, 0.5, 1.0, 2.0]
            .iter()
            .map(|&beta| seeded_elbo(model.as_ref(), &batch, beta, 9).total)
            .collect();
        assert!(totals.windows(2).all(|w| w[1] < w[0]), "{kind}: {totals:?}");
        let b0 = seeded_elbo(model.as_ref(), &batch, 0.0, 9);
        assert!((b0.total - b0.recon()).abs() < 1e-9 * b0.total.abs().max(1.0));
    }
}

#[test]
fn padded_frames_contribute_nothing() {
    let mut r = rng(21);
    let seqs = random_sequences(&mut r, 2, 5, 3, PS);
    let short: Vec<Vec<f64>> = seqs[1][..3].to_vec();
    let mut frames: Vec<Tensor<f64>> = (0..5)
        .map(|t| Tensor::from_fn(2, 3, |b, f| if b == 1 && t >= 3 { 7.5 } else { seqs[b][t][f] }))
        .collect();
    frames[4].row_mut(1)[0] = 0.25;
    let padded = SequenceBatch::new(frames, vec![5, 3]).unwrap();
    let first = SequenceBatch::from_sequences(&[seqs[0].clone()]).unwrap();
    let second = SequenceBatch::from_sequences(&[short]).unwrap();
    for kind in ModelKind::ALL {
        let model = build(kind);
        let joint = zero_elbo(model.as_ref(), &padded, 1.0).total;
        let separate = zero_elbo(model.as_ref(), &first, 1.0).total + zero_elbo(model.as_ref(), &second, 1.0).total;
        assert!((joint - separate).abs() < 1e-9 * separate.abs().max(1.0), "{kind}: {joint} vs {separate}");
    }
}

#[test]
fn zero_noise_cascade_returns_posterior_means() {
    for kind in ModelKind::ALL {
        let model = build(kind);
        let batch = random_batch(2, 2, 4, 3, PS);
        let lat = posterior_sample_cascade(model.as_ref(), &batch, &mut Noise::Zero).unwrap();
        assert_eq!(lat.len(), 4);
        for t in 0..4 {
            assert_eq!(lat.samples[t], lat.posterior_mean[t], "{kind}");
        }
    }
}

#[test]
fn seeded_evaluation_and_generation_are_reproducible() {
    for kind in ModelKind::ALL {
        let model = build(kind);
        let batch = random_batch(4, 2, 3, 3, PS);
        let a = seeded_elbo(model.as_ref(), &batch, 1.0, 77);
        let b = seeded_elbo(model.as_ref(), &batch, 1.0, 77);
        assert_eq!(a.total.to_bits(), b.total.to_bits(), "{kind}");
        let c1 = posterior_sample_cascade(model.as_ref(), &batch, &mut Noise::Rng(&mut rng(5))).unwrap();
        let c2 = posterior_sample_cascade(model.as_ref(), &batch, &mut Noise::Rng(&mut rng(5))).unwrap();
        assert_eq!(c1, c2);
        let g1 = model.generate(5, 2, &mut Noise::Rng(&mut rng(6)), None).unwrap();
        let g2 = model.generate(5, 2, &mut Noise::Rng(&mut rng(6)), None).unwrap();
        assert_eq!(g1.frames.frames(), g2.frames.frames());
        let z1 = model.generate(5, 2, &mut Noise::Zero, None).unwrap();
        let z2 = model.generate(5, 2, &mut Noise::Zero, None).unwrap();
        assert_eq!(z1.frames.frames(), z2.frames.frames());
    }
}

#[test]
fn generation_teacher_forces_the_prefix_then_free_runs() {
    let prefix = random_batch(8, 2, 2, 3, PS);
    for kind in ModelKind::ALL {
        let model = build(kind);
        let out = model.generate(6, 2, &mut Noise::Rng(&mut rng(1)), Some(&prefix)).unwrap();
        assert_eq!(out.frames.num_frames(), 6);
        assert_eq!(out.latents.len(), 6);
        assert_eq!(out.frames.frame(0), prefix.frame(0));
        assert_eq!(out.frames.frame(1), prefix.frame(1));
        for t in 2..6 {
            assert!(out.frames.frame(t).as_slice().iter().all(|v| v.is_finite() && *v >= 0.0), "{kind}");
        }
        assert!(matches!(model.generate(0, 2, &mut Noise::Zero, None), Err(DvaeError::EmptyInput(_))));
    }
}

#[test]
fn generation_and_inference_share_the_prior_along_a_trajectory() {
    for kind in [ModelKind::Dkf, ModelKind::Vrnn, ModelKind::Srnn, ModelKind::Dsae] {
        let model = build(kind);
        let batch = random_batch(12, 2, 4, 3, PS);
        let mut g = Graph::new();
        let pass = model.run(&mut g, &batch, &mut Noise::Rng(&mut rng(3))).unwrap();
        let mut ctx = model.start_generation(&mut g, 2, &mut Noise::Zero).unwrap();
        for (t, step) in pass.steps.iter().enumerate() {
            let KlTerm::Prior(inference_prior) = step.kl else { panic!("{kind} has an analytic prior") };
            ctx.t = t;
            let prior = model.prior_step(&mut g, &mut ctx, &mut Noise::Zero).unwrap();
            for (a, b) in [(prior.mean, inference_prior.mean), (prior.log_var, inference_prior.log_var)] {
                let d = max_abs_diff(g.value(a).as_slice(), g.value(b).as_slice());
                assert!(d < 1e-12, "{kind} t={t}: {d}");
            }
            ctx.prev_x = g.input(batch.frame(t).clone());
            ctx.prev_z = step.z;
        }
    }
}

#[test]
fn static_vae_factorizes_over_frames() {
    let model = build(ModelKind::Vae);
    let mut r = rng(30);
    let seqs = random_sequences(&mut r, 1, 4, 3, PS);
    let whole = zero_elbo(model.as_ref(), &SequenceBatch::from_sequences(&seqs).unwrap(), 1.0).total;
    let parts: f64 = seqs[0]
        .iter()
        .map(|x| zero_elbo(model.as_ref(), &SequenceBatch::from_sequences(&[vec![x.clone()]]).unwrap(), 1.0).total)
        .sum();
    assert!((whole - parts).abs() < 1e-10 * whole.abs().max(1.0));
}

#[test]
fn static_vae_generates_one_standard_normal_draw() {
    let model = build(ModelKind::Vae);
    let out = model.generate(1, 1, &mut Noise::Rng(&mut rng(40)), None).unwrap();
    let mut r = rng(40);
    let expected: Vec<f64> = (0..2).map(|_| r.sample(StandardNormal)).collect();
    assert_eq!(out.latents[0].as_slice(), expected.as_slice());
    assert_eq!(out.frames.num_frames(), 1);
}

#[test]
fn static_vae_kl_vanishes_when_the_encoder_head_outputs_zeros() {
    let mut model = Vae::<f64>::new(VaeConfig::from_model(&micro(ModelKind::Vae)), &mut rng(1)).unwrap();
    let lin = model.encoder_head().lin.clone();
    for id in [lin.w, lin.b] {
        let t = model.params_mut().get_mut(id);
        *t = t.map(|_| 0.0);
    }
    let batch = random_batch(3, 2, 3, 3, PS);
    let b = seeded_elbo(&model, &batch, 1.0, 4);
    assert_eq!(b.kl(), 0.0);
    assert!((b.total - b.recon()).abs() < 1e-12);
}

fn dense(p: &dvae::ParamSet<f64>, name: &str, x: &[f64]) -> Vec<f64> {
    let w = p.get(p.find(&format!("{name}.w")).unwrap());
    let b = p.get(p.find(&format!("{name}.b")).unwrap());
    (0..w.cols())
        .map(|j| b[(0, j)] + (0..w.rows()).map(|i| x[i] * w[(i, j)]).sum::<f64>())
        .collect()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

#[test]
fn dkf_transition_matches_hand_composition() {
    let model = Dkf::<f64>::new(DkfConfig::from_model(&micro(ModelKind::Dkf)), &mut rng(5)).unwrap();
    let p = model.params();
    let mut r = rng(6);
    for _ in 0..5 {
        let z: Vec<f64> = (0..2).map(|_| r.sample(StandardNormal)).collect();
        let g1: Vec<f64> = dense(p, "prior.gate.0", &z).into_iter().map(|v| v.max(0.0)).collect();
        let gate: Vec<f64> = dense(p, "prior.gate.1", &g1).into_iter().map(sigmoid).collect();
        let n1: Vec<f64> = dense(p, "prior.nonlin.0", &z).into_iter().map(|v| v.max(0.0)).collect();
        let nonlin = dense(p, "prior.nonlin.1", &n1);
        let lin = dense(p, "prior.lin.0", &z);
        let relu_n: Vec<f64> = nonlin.iter().map(|v| v.max(0.0)).collect();
        let var: Vec<f64> = dense(p, "prior.var.0", &relu_n).into_iter().map(softplus).collect();
        let mut g = Graph::new();
        let zv = g.input(Tensor::row_vector(&z));
        let out = model.transition(&mut g, zv).unwrap().values(&g, 0);
        for i in 0..2 {
            let mean = (1.0 - gate[i]) * lin[i] + gate[i] * nonlin[i];
            assert!((out.mean[i] - mean).abs() < 1e-12);
            assert!((out.log_var[i] - (var[i] + 1e-10).ln()).abs() < 1e-10);
        }
    }
}

fn set_gate_bias(model: &mut Dkf<f64>, value: f64) {
    let id = model.transition_blocks().gate.layers()[1].0.b;
    let t = model.params_mut().get_mut(id);
    *t = t.map(|_| value);
}

#[test]
fn dkf_gate_extremes_select_one_branch() {
    let mut model = Dkf::<f64>::new(DkfConfig::from_model(&micro(ModelKind::Dkf)), &mut rng(8)).unwrap();
    let z = [0.3, -1.2];
    let eval = |m: &Dkf<f64>, name: &str| {
        let mut g = Graph::new();
        let zv = g.input(Tensor::row_vector(&z));
        let out = m.transition(&mut g, zv).unwrap().values(&g, 0).mean;
        let p = m.params();
        let branch = if name == "lin" {
            dense(p, "prior.lin.0", &z)
        } else {
            let h: Vec<f64> = dense(p, "prior.nonlin.0", &z).into_iter().map(|v| v.max(0.0)).collect();
            dense(p, "prior.nonlin.1", &h)
        };
        max_abs_diff(&out, &branch)
    };
    set_gate_bias(&mut model, -1000.0);
    assert!(eval(&model, "lin") < 1e-12);
    set_gate_bias(&mut model, 1000.0);
    assert!(eval(&model, "nonlin") < 1e-12);
}

#[test]
fn dkf_identity_transition_is_a_fixed_point() {
    let mut model = Dkf::<f64>::new(DkfConfig::from_model(&micro(ModelKind::Dkf)), &mut rng(9)).unwrap();
    set_gate_bias(&mut model, -1000.0);
    let lin = model.transition_blocks().linear_mean.layers()[0].0.clone();
    *model.params_mut().get_mut(lin.w) = Tensor::identity(2);
    *model.params_mut().get_mut(lin.b) = Tensor::zeros(1, 2);
    let mut g = Graph::new();
    let z = Tensor::from_f64(3, 2, &[0.5, -0.2, 1.5, 2.0, -3.0, 0.0]).unwrap();
    let zv = g.input(z.clone());
    let out = model.transition(&mut g, zv).unwrap();
    assert_eq!(g.value(out.mean), &z);

    let gen = model.generate(6, 2, &mut Noise::Zero, None).unwrap();
    for t in 1..6 {
        assert_eq!(gen.latents[t], gen.latents[0]);
    }
}

#[test]
fn dkf_first_prior_is_the_transition_of_the_zero_state() {
    let model = Dkf::<f64>::new(DkfConfig::from_model(&micro(ModelKind::Dkf)), &mut rng(10)).unwrap();
    let batch = random_batch(2, 2, 3, 3, PS);
    let mut g = Graph::new();
    let pass = model.run(&mut g, &batch, &mut Noise::Zero).unwrap();
    let KlTerm::Prior(p1) = pass.steps[0].kl else { panic!() };
    let z0 = g.zeros(2, 2);
    let t0 = model.transition(&mut g, z0).unwrap();
    assert_eq!(g.value(p1.mean), g.value(t0.mean));
    assert_eq!(g.value(p1.log_var), g.value(t0.log_var));
    assert!(g.value(t0.log_var).all_finite());
}

#[test]
fn dkf_posterior_sees_the_future_but_not_the_past_given_the_previous_latent() {
    let model = build(ModelKind::Dkf);
    let batch = random_batch(13, 1, 5, 3, PS);
    let zs = random_latents(14, 5, 1, 2);
    let base = forced_posteriors(model.as_ref(), &batch, &zs);
    let t = 2;
    let past = forced_posteriors(model.as_ref(), &perturb_frame(&batch, t - 1, 0.4), &zs);
    let past2 = forced_posteriors(model.as_ref(), &perturb_frame(&batch, 0, 0.4), &zs);
    assert_eq!(past[t], base[t]);
    assert_eq!(past2[t], base[t]);
    let future = forced_posteriors(model.as_ref(), &perturb_frame(&batch, t + 1, 0.4), &zs);
    assert!(max_abs_diff(&future[t], &base[t]) > 1e-6);
    let mut other = zs.clone();
    other[t - 1] = other[t - 1].map(|v| v + 0.5);
    let moved = forced_posteriors(model.as_ref(), &batch, &other);
    assert!(max_abs_diff(&moved[t], &base[t]) > 1e-6);
}

fn kl_matches_standard_normal(kind: ModelKind) {
    let model = build(kind);
    let batch = random_batch(15, 3, 4, 3, PS);
    let b = zero_elbo(model.as_ref(), &batch, 1.0);
    let lat = posterior_sample_cascade(model.as_ref(), &batch, &mut Noise::Zero).unwrap();
    for t in 0..4 {
        let expected: f64 = (0..3)
            .map(|i| kl_diag_gaussians(&lat.posterior(t, i), &standard(2)).unwrap())
            .sum();
        assert!((b.kl_per_t[t] - expected).abs() < 1e-12, "{kind} t={t}");
    }
}

#[test]
fn storn_and_rvae_kl_is_the_closed_form_standard_normal_kl() {
    for kind in [ModelKind::Storn, ModelKind::RvaeCausal, ModelKind::RvaeNoncausal, ModelKind::Vae] {
        kl_matches_standard_normal(kind);
    }
}

#[test]
fn storn_encoder_is_causal_and_ignores_the_latent_history() {
    let model = build(ModelKind::Storn);
    let batch = random_batch(16, 1, 5, 3, PS);
    let zs = random_latents(17, 5, 1, 2);
    let base = forced_posteriors(model.as_ref(), &batch, &zs);
    let t = 2;
    let mut other = zs.clone();
    other[0] = other[0].map(|v| v - 1.0);
    other[1] = other[1].map(|v| v + 2.0);
    assert_eq!(forced_posteriors(model.as_ref(), &batch, &other), base);
    let future = forced_posteriors(model.as_ref(), &perturb_frame(&batch, t + 1, 0.5), &zs);
    assert_eq!(future[..=t], base[..=t]);
    assert!(max_abs_diff(&future[t + 1], &base[t + 1]) > 1e-6);
}

#[test]
fn storn_cascade_sampling_equals_independent_sampling() {
    let model = build(ModelKind::Storn);
    let single = random_batch(18, 1, 3, 3, PS);
    let n = 10_000;
    let many = single.select(&vec![0; n]).unwrap();
    let cascade = posterior_sample_cascade(model.as_ref(), &many, &mut Noise::Rng(&mut rng(19))).unwrap();
    let params = posterior_sample_cascade(model.as_ref(), &single, &mut Noise::Zero).unwrap();
    let mut r = rng(20);
    let independent: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|t| {
            let q = params.posterior(t, 0);
            (0..n)
                .map(|_| {
                    let eps: Vec<f64> = (0..2).map(|_| r.sample(StandardNormal)).collect();
                    dvae::distributions::reparam_sample(&q, &eps).unwrap()
                })
                .collect()
        })
        .collect();
    let moments = |xs: &dyn Fn(usize) -> f64| {
        let m = (0..n).map(xs).sum::<f64>() / n as f64;
        let v = (0..n).map(|i| (xs(i) - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        (m, v)
    };
    for t in 0..3 {
        let c = rows(&cascade.samples[t]);
        for d in 0..2 {
            let (mc, vc) = moments(&|i| c[i][d]);
            let (mi, vi) = moments(&|i| independent[t][i][d]);
            let se_m = (2.0 * vc / n as f64).sqrt();
            let se_v = (2.0 * 2.0 * vc * vc / n as f64).sqrt();
            assert!((mc - mi).abs() < 4.0 * se_m, "t={t} d={d}: {mc} vs {mi}");
            assert!((vc - vi).abs() < 4.0 * se_v, "t={t} d={d}: {vc} vs {vi}");
        }
    }
    let c0 = rows(&cascade.samples[0]);
    let c1 = rows(&cascade.samples[1]);
    let (m0, v0) = moments(&|i| c0[i][0]);
    let (m1, v1) = moments(&|i| c1[i][0]);
    let cov = (0..n).map(|i| (c0[i][0] - m0) * (c1[i][0] - m1)).sum::<f64>() / (n - 1) as f64;
    assert!((cov / (v0 * v1).sqrt()).abs() < 4.0 / (n as f64).sqrt());
}

struct Lstm {
    h: Vec<f64>,
    c: Vec<f64>,
}

impl Lstm {
    fn step(&mut self, p: &dvae::ParamSet<f64>, name: &str, x: &[f64]) {
        let wx = p.get(p.find(&format!("{name}.wx")).unwrap());
        let wh = p.get(p.find(&format!("{name}.wh")).unwrap());
        let b = p.get(p.find(&format!("{name}.b")).unwrap());
        let hd = self.h.len();
        let pre: Vec<f64> = (0..4 * hd)
            .map(|j| {
                b[(0, j)]
                    + (0..x.len()).map(|i| x[i] * wx[(i, j)]).sum::<f64>()
                    + (0..hd).map(|i| self.h[i] * wh[(i, j)]).sum::<f64>()
            })
            .collect();
        for k in 0..hd {
            let i = sigmoid(pre[k]);
            let f = sigmoid(pre[hd + k]);
            let g = pre[2 * hd + k].tanh();
            let o = sigmoid(pre[3 * hd + k]);
            self.c[k] = f * self.c[k] + i * g;
            self.h[k] = o * self.c[k].tanh();
        }
    }
}

fn tanh_layer(p: &dvae::ParamSet<f64>, name: &str, x: &[f64]) -> Vec<f64> {
    dense(p, name, x).into_iter().map(f64::tanh).collect()
}

#[test]
fn storn_joint_matches_the_hand_unrolled_recurrence() {
    let model = Storn::<f64>::new(StornConfig::from_model(&micro(ModelKind::Storn)), &mut rng(22)).unwrap();
    let p = model.params();
    let batch = random_batch(23, 1, 2, 3, PS);
    let zs = random_latents(24, 2, 1, 2);
    let mut g = Graph::new();
    let forced: Vec<_> = zs.iter().map(|z| g.input(z.clone())).collect();
    let pass = model.run_with(&mut g, &batch, &mut Noise::Zero, Some(&forced)).unwrap();
    let mut model_joint = 0.0;
    for (t, s) in pass.steps.iter().enumerate() {
        let xv = g.input(batch.frame(t).clone());
        let lp = s.obs.log_prob(&mut g, xv);
        model_joint += g.scalar(lp) + gaussian_log_prob(zs[t].as_slice(), &standard(2)).unwrap();
    }

    let mut cell = Lstm {
        h: vec![0.0; 4],
        c: vec![0.0; 4],
    };
    let mut oracle = 0.0;
    let mut x_prev = vec![0.0; 3];
    for t in 0..2 {
        let fx = tanh_layer(p, "dec.x.0", &x_prev);
        let fz = tanh_layer(p, "dec.z.1", &tanh_layer(p, "dec.z.0", zs[t].as_slice()));
        let input: Vec<f64> = fx.into_iter().chain(fz).collect();
        cell.step(p, "dec.rnn", &input);
        let d = tanh_layer(p, "dec.out.0", &cell.h);
        let log_var = dense(p, "dec.head", &d);
        let x = batch.frame(t).row(0).to_vec();
        oracle += itakura_saito_log_prob(&x, &PowerSpecVarianceParams { log_var }).unwrap();
        oracle += gaussian_log_prob(zs[t].as_slice(), &standard(2)).unwrap();
        x_prev = x;
    }
    assert!((model_joint - oracle).abs() < 1e-10, "{model_joint} vs {oracle}");
}

#[test]
fn vrnn_kl_compares_encoder_and_prior_heads_at_the_same_state() {
    let model = Vrnn::<f64>::new(VrnnConfig::from_model(&micro(ModelKind::Vrnn)), &mut rng(25)).unwrap();
    let batch = random_batch(26, 2, 4, 3, PS);
    let mut g = Graph::new();
    let mut r = rng(27);
    let eval = elbo(&model, &mut g, &batch, ElboOptions::default(), &mut Noise::Rng(&mut r)).unwrap();
    let mut g2 = Graph::new();
    let pass = model.run(&mut g2, &batch, &mut Noise::Rng(&mut rng(27))).unwrap();
    let xs = batch.inputs(&mut g2);
    let zs: Vec<_> = pass.steps.iter().map(|s| s.z).collect();
    let hs = model.hidden_states(&mut g2, &xs, &zs).unwrap();
    assert_eq!(hs.len(), 4);
    for (t, s) in pass.steps.iter().enumerate() {
        let KlTerm::Prior(prior) = s.kl else { panic!() };
        let expected: f64 = (0..2)
            .map(|i| kl_diag_gaussians(&s.posterior.values(&g2, i), &prior.values(&g2, i)).unwrap())
            .sum();
        assert!((eval.breakdown.kl_per_t[t] - expected).abs() < 1e-12);
    }
}

#[test]
fn vrnn_shared_recurrence_receives_gradient_from_both_terms() {
    let model = build(ModelKind::Vrnn);
    let batch = random_batch(28, 2, 3, 3, PS);
    let grad = |beta: f64| {
        let mut g = Graph::new();
        let opts = ElboOptions { n_samples: 1, beta };
        let e = elbo(model.as_ref(), &mut g, &batch, opts, &mut Noise::Rng(&mut rng(29))).unwrap();
        g.backward(e.total).dense(model.params())
    };
    let recon = grad(0.0);
    let full = grad(1.0);
    for (i, entry) in model.params().entries().iter().enumerate() {
        if entry.name.starts_with("rnn.") {
            let r: f64 = recon[i].as_slice().iter().map(|v| v.abs()).sum();
            let k: f64 = recon[i].as_slice().iter().zip(full[i].as_slice()).map(|(a, b)| (a - b).abs()).sum();
            assert!(r > 0.0 && k > 0.0, "{}", entry.name);
        }
    }
}

#[test]
fn srnn_decoder_ignores_the_latent_history_given_the_current_latent() {
    let model = build(ModelKind::Srnn);
    let batch = random_batch(31, 1, 4, 3, PS);
    let zs = random_latents(32, 4, 1, 2);
    let base = forced_observations(model.as_ref(), &batch, &zs);
    let mut other = zs.clone();
    other[0] = other[0].map(|v| v + 1.0);
    other[1] = other[1].map(|v| v - 0.7);
    let moved = forced_observations(model.as_ref(), &batch, &other);
    assert_eq!(moved[2..], base[2..]);
    let srnn = Srnn::<f64>::new(SrnnConfig::from_model(&micro(ModelKind::Srnn)), &mut rng(7)).unwrap();
    let mut g = Graph::new();
    let xs = batch.inputs(&mut g);
    let hs = srnn.hidden_states(&mut g, &xs).unwrap();
    assert!(g.value(hs[0]).as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn srnn_smoothing_sees_future_frames_and_filtering_does_not() {
    let smoothing = build(ModelKind::Srnn);
    let filtering = build_model::<f64>(
        &ModelConfig {
            srnn_filtering: true,
            ..micro(ModelKind::Srnn)
        },
        7,
    )
    .unwrap();
    assert!(smoothing.needs_future_x());
    assert!(!filtering.needs_future_x());
    for seed in 0..5 {
        let batch = random_batch(40 + seed, 1, 5, 3, PS);
        let zs = random_latents(50 + seed, 5, 1, 2);
        let t = 1;
        let moved = perturb_frame(&batch, t + 2, 0.5);
        let a = forced_posteriors(smoothing.as_ref(), &batch, &zs);
        let b = forced_posteriors(smoothing.as_ref(), &moved, &zs);
        assert!(max_abs_diff(&a[t], &b[t]) > 1e-8);
        let a = forced_posteriors(filtering.as_ref(), &batch, &zs);
        let b = forced_posteriors(filtering.as_ref(), &perturb_frame(&batch, t + 1, 0.5), &zs);
        assert_eq!(a[..=t], b[..=t]);
    }
}

#[test]
fn rvae_causal_decoding_ignores_future_latents_and_noncausal_does_not() {
    let batch = random_batch(60, 1, 4, 3, PS);
    let zs = random_latents(61, 4, 1, 2);
    let mut moved = zs.clone();
    moved[3] = moved[3].map(|v| v + 1.5);
    let causal = build(ModelKind::RvaeCausal);
    let a = forced_observations(causal.as_ref(), &batch, &zs);
    let b = forced_observations(causal.as_ref(), &batch, &moved);
    assert_eq!(a[..3], b[..3]);
    let noncausal = build(ModelKind::RvaeNoncausal);
    let a = forced_observations(noncausal.as_ref(), &batch, &zs);
    let b = forced_observations(noncausal.as_ref(), &batch, &moved);
    assert!(max_abs_diff(&a[0], &b[0]) > 1e-8);
}

#[test]
fn noncausal_rvae_refuses_incremental_decoding() {
    let model = Rvae::<f64>::new(RvaeConfig::from_model(&micro(ModelKind::RvaeNoncausal)), &mut rng(62)).unwrap();
    assert!(!model.is_causal());
    let mut g = Graph::new();
    let mut ctx = model.start_generation(&mut g, 1, &mut Noise::Zero).unwrap();
    let z = g.zeros(1, 2);
    assert!(matches!(model.decode_step(&mut g, &mut ctx, z), Err(DvaeError::Contract(_))));
    let out = model.generate(4, 2, &mut Noise::Rng(&mut rng(63)), None).unwrap();
    assert_eq!(out.frames.num_frames(), 4);
}

#[test]
fn dsae_sequence_kl_is_the_closed_form_kl_of_the_sequence_head() {
    let model = build(ModelKind::Dsae);
    let batch = random_batch(64, 2, 4, 3, PS);
    let b = zero_elbo(model.as_ref(), &batch, 1.0);
    let mut g = Graph::new();
    let pass = model.run(&mut g, &batch, &mut Noise::Zero).unwrap();
    let v = pass.sequence_posterior.unwrap();
    let expected: f64 = (0..2).map(|i| kl_diag_gaussians(&v.values(&g, i), &standard(2)).unwrap()).sum();
    assert!((b.sequence_kl - expected).abs() < 1e-12);
}

#[test]
fn dsae_sequence_latent_conditions_each_item() {
    let model = Dsae::<f64>::new(DsaeConfig::from_model(&micro(ModelKind::Dsae)), &mut rng(65)).unwrap();
    let mut g = Graph::new();
    let z = g.input(Tensor::from_f64(2, 2, &[0.1, 0.2, -0.3, 0.4]).unwrap());
    let v = g.input(Tensor::from_f64(2, 2, &[1.0, -1.0, 0.5, 2.0]).unwrap());
    let swapped_z = g.input(Tensor::from_f64(2, 2, &[-0.3, 0.4, 0.1, 0.2]).unwrap());
    let swapped_v = g.input(Tensor::from_f64(2, 2, &[0.5, 2.0, 1.0, -1.0]).unwrap());
    let a = model.decode_at(&mut g, z, v).unwrap().mean(&g);
    let b = model.decode_at(&mut g, swapped_z, swapped_v).unwrap().mean(&g);
    assert_eq!(a.row(0), b.row(1));
    assert_eq!(a.row(1), b.row(0));
    let mismatched = model.decode_at(&mut g, z, swapped_v).unwrap().mean(&g);
    assert!(max_abs_diff(a.row(0), mismatched.row(0)) > 1e-8);
}

#[test]
fn dsae_with_a_silent_dynamics_cell_has_a_constant_prior() {
    let mut model = Dsae::<f64>::new(DsaeConfig::from_model(&micro(ModelKind::Dsae)), &mut rng(66)).unwrap();
    let cell = model.prior_cell().clone();
    for id in [cell.wx, cell.wh, cell.b] {
        let t = model.params_mut().get_mut(id);
        *t = t.map(|_| 0.0);
    }
    let head_b = model.prior_head().lin.b;
    *model.params_mut().get_mut(head_b) = Tensor::from_f64(1, 4, &[0.3, -0.2, 0.1, -0.5]).unwrap();
    let prior = GaussianParams::new(vec![0.3, -0.2], vec![0.1, -0.5]).unwrap();
    let batch = random_batch(67, 2, 2, 3, PS);
    let b = seeded_elbo(&model, &batch, 1.0, 68);
    let lat = posterior_sample_cascade(&model, &batch, &mut Noise::Rng(&mut rng(68))).unwrap();
    for t in 0..2 {
        let expected: f64 = (0..2).map(|i| kl_diag_gaussians(&lat.posterior(t, i), &prior).unwrap()).sum();
        assert!((b.kl_per_t[t] - expected).abs() < 1e-12);
    }
    let mut g = Graph::new();
    let pass = model.run(&mut g, &batch, &mut Noise::Rng(&mut rng(68))).unwrap();
    let v = pass.sequence_posterior.unwrap();
    let seq: f64 = (0..2).map(|i| kl_diag_gaussians(&v.values(&g, i), &standard(2)).unwrap()).sum();
    let recon: f64 = b.recon();
    let kl_z: f64 = b.kl_per_t.iter().sum();
    assert!((b.sequence_kl - seq).abs() < 1e-12);
    assert!((b.total - (recon - kl_z - seq)).abs() < 1e-10);
}

fn kvae_micro(components: usize, emission_noise: f64) -> Kvae<f64> {
    let mut cfg = micro(ModelKind::Kvae);
    cfg.kvae.components = components;
    cfg.kvae.emission_noise = emission_noise;
    Kvae::new(KvaeConfig::from_model(&cfg), &mut rng(70)).unwrap()
}

#[test]
fn kvae_mixing_weights_lie_on_the_simplex() {
    let model = kvae_micro(3, 0.01);
    let mut r = rng(71);
    for len in [1, 4, 9] {
        let feats: Vec<Vec<f64>> = (0..len).map(|_| (0..2).map(|_| 3.0 * r.sample::<f64, _>(StandardNormal)).collect()).collect();
        let alphas = model.alpha_sequence(&feats).unwrap();
        assert_eq!(alphas.len(), len);
        for a in &alphas {
            assert_eq!(a.len(), 3);
            assert!(a.iter().all(|&w| w.is_finite() && w >= 0.0));
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    let first = model.alpha_sequence(&[vec![5.0, -5.0]]).unwrap();
    let again = model.alpha_sequence(&[vec![-1.0, 0.0]]).unwrap();
    assert_eq!(first, again);
}

#[test]
fn kvae_bound_assembles_from_vae_and_lds_terms() {
    let model = kvae_micro(1, 1e-3);
    let batch = random_batch(72, 1, 2, 3, PS);
    let b = zero_elbo(&model, &batch, 1.0);
    let lat = posterior_sample_cascade(&model, &batch, &mut Noise::Zero).unwrap();
    let feats: Vec<Vec<f64>> = lat.samples.iter().map(|a| a.row(0).to_vec()).collect();
    let log_q: f64 = (0..2).map(|t| gaussian_log_prob(&feats[t], &lat.posterior(t, 0)).unwrap()).sum();
    let mixed = mix_bank(&model.bank(), &[1.0]).unwrap();
    let sched: Vec<LdsParams<f64>> = vec![mixed.clone(), mixed.clone()];
    let init = LdsInit::from_state_noise(&mixed);
    let inputs = vec![vec![0.0; 2], feats[0].clone()];
    let log_pa = lds_log_marginal(sched.as_slice(), &init, &feats, Some(&inputs)).unwrap();
    let means = reconstruct(&model, &batch, &mut Noise::Zero).unwrap();
    let recon: f64 = (0..2)
        .map(|t| {
            let log_var: Vec<f64> = means[t].row(0).iter().map(|v| v.ln()).collect();
            itakura_saito_log_prob(batch.frame(t).row(0), &PowerSpecVarianceParams { log_var }).unwrap()
        })
        .sum();
    assert!((b.kl() - (log_q - log_pa)).abs() < 1e-8, "{} vs {}", b.kl(), log_q - log_pa);
    assert!((b.recon() - recon).abs() < 1e-8);
    assert!((b.total - (recon - log_q + log_pa)).abs() < 1e-8);
}

#[test]
fn kvae_regularizer_is_nonnegative_in_expectation() {
    let model = kvae_micro(2, 0.01);
    let single = random_batch(73, 1, 3, 3, PS);
    let n = 1000;
    let many = single.select(&vec![0; n]).unwrap();
    let mut g = Graph::new();
    let pass = model.run(&mut g, &many, &mut Noise::Rng(&mut rng(74))).unwrap();
    let mut per_draw = vec![0.0; n];
    for s in &pass.steps {
        let KlTerm::Estimated(v) = s.kl else { panic!() };
        for (i, k) in g.value(v).as_slice().iter().enumerate() {
            per_draw[i] += k;
        }
    }
    let mean = per_draw.iter().sum::<f64>() / n as f64;
    let var = per_draw.iter().map(|k| (k - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!(mean >= -3.0 * se, "mean {mean}, se {se}");
}

#[test]
fn kvae_generation_is_finite() {
    let model = kvae_micro(2, 0.01);
    let out = model.generate(5, 3, &mut Noise::Rng(&mut rng(75)), None).unwrap();
    assert!(out.frames.frames().iter().all(|f| f.all_finite()));
    assert!(out.latents.iter().all(|a| a.all_finite()));
    let ObsVar::PowerSpec { .. } = ({
        let mut g = Graph::new();
        let mut ctx = model.start_generation(&mut g, 1, &mut Noise::Zero).unwrap();
        let z = g.zeros(1, 2);
        model.decode_step(&mut g, &mut ctx, z).unwrap()
    }) else {
        panic!()
    };
}

#[test]
fn speech_vae_has_the_reference_parameter_count() {
    // 257 → 256 → 128 → (16 mean, 16 log-var); 16 → 128 → 256 → 257 log-var.
    let dense = |i: usize, o: usize| i * o + o;
    let expected = dense(257, 256) + dense(256, 128) + dense(128, 32) + dense(16, 128) + dense(128, 256) + dense(256, 257);
    assert_eq!(expected, 204_321);
    let model = build_model::<f32>(&ModelConfig::speech(ModelKind::Vae), 0).unwrap();
    assert_eq!(model.params().num_scalars(), expected);
}
