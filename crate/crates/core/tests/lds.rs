mod common;

use common::oracles::{discrete_lyapunov, from_na, instance, kalman_deviation};
use dvae::data::{spectral_radius, synth_lds_dataset};
use dvae::lds::{kalman_filter, lds_log_marginal, LdsInit, LdsParams};
use dvae::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-8;

#[test]
fn kalman_recursions_match_dense_conditioning() {
    for seed in 0..50 {
        let inst = instance(seed);
        let dev = kalman_deviation(&inst);
        assert!(dev < TOL, "seed {seed}: deviation {dev}");
    }
}

#[test]
fn per_step_and_shared_schedules_agree_on_constant_parameters() {
    let inst = instance(1);
    assert!(inst.shared);
    let copies = vec![inst.params[0].clone(); inst.obs.len()];
    let a = kalman_filter(&inst.params[0], &inst.init, &inst.obs, None).unwrap();
    let b = kalman_filter(copies.as_slice(), &inst.init, &inst.obs, None).unwrap();
    assert_eq!(a.log_marginal, b.log_marginal);
}

#[test]
fn single_step_filter_is_bayes_rule() {
    let p = LdsParams::<f64>::new(Tensor::from_vec(1, 1, vec![0.9]).unwrap(), Tensor::from_vec(1, 1, vec![1.0]).unwrap(), &[1.0], &[1.0]).unwrap();
    let init = LdsInit::from_state_noise(&p);
    let out = kalman_filter(&p, &init, &[vec![2.0]], None).unwrap();
    assert!((out.steps[0].mean[0] - 1.0).abs() < 1e-12);
    assert!((out.steps[0].cov[(0, 0)] - 0.5).abs() < 1e-12);
    let expected = -0.5 * ((2.0 * std::f64::consts::PI * 2.0).ln() + 4.0 / 2.0);
    assert!((out.log_marginal - expected).abs() < 1e-12);
}

#[test]
fn stationary_covariance_matches_lyapunov_solution() {
    let a = DMatrix::from_row_slice(2, 2, &[0.6, 0.2, -0.1, 0.5]);
    let q = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
    let params = LdsParams {
        transition: from_na(&a),
        input: Tensor::zeros(2, 0),
        emission: Tensor::from_vec(1, 2, vec![1.0, 0.0]).unwrap(),
        state_noise: from_na(&q),
        emission_noise: Tensor::from_vec(1, 1, vec![0.1]).unwrap(),
        state_bias: vec![0.0; 2],
        emission_bias: vec![0.0],
    };
    assert!(spectral_radius(&params.transition) < 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let burn_in = 30;
    let data = synth_lds_dataset(&params, 4000, burn_in + 20, &mut rng).unwrap();
    let mut acc = DMatrix::<f64>::zeros(2, 2);
    let mut n = 0.0;
    for seq in &data.states {
        for z in &seq[burn_in..] {
            let v = DVector::from_column_slice(z);
            acc += &v * v.transpose();
            n += 1.0;
        }
    }
    let empirical = acc / n;
    let expected = discrete_lyapunov(&a, &q);
    for r in 0..2 {
        for c in 0..2 {
            let scale = (expected[(r, r)] * expected[(c, c)]).sqrt();
            assert!(
                (empirical[(r, c)] - expected[(r, c)]).abs() < 0.05 * scale,
                "entry ({r},{c}): {} vs {}",
                empirical[(r, c)],
                expected[(r, c)]
            );
        }
    }
}

#[test]
fn generated_sequences_are_more_likely_than_shuffled_ones() {
    let params = LdsParams::new(
        Tensor::from_vec(2, 2, vec![0.95, 0.1, -0.1, 0.9]).unwrap(),
        Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        &[0.1, 0.1],
        &[0.05, 0.05],
    )
    .unwrap();
    let init = LdsInit::from_state_noise(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = synth_lds_dataset(&params, 20, 60, &mut rng).unwrap();
    let mut wins = 0;
    for seq in &data.observations {
        let mut shuffled = seq.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let a = lds_log_marginal(&params, &init, seq, None).unwrap();
        let b = lds_log_marginal(&params, &init, &shuffled, None).unwrap();
        if a > b {
            wins += 1;
        }
    }
    assert_eq!(wins, 20);
}
