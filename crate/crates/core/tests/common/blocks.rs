//! Finite-difference checks for single building blocks.

use dvae::{Graph, ParamSet, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Checks `d f / d params` for a scalar function built in a fresh graph.
pub fn block_check(params: &mut ParamSet<f64>, rtol: f64, f: &dyn Fn(&mut Graph<f64>, &ParamSet<f64>) -> Var) -> f64 {
    let mut g = Graph::new();
    let out = f(&mut g, params);
    let grads: Vec<f64> = g.backward(out).dense(params).into_iter().flat_map(|t| t.into_vec()).collect();
    let base = params.flatten();
    let value = |p: &ParamSet<f64>| {
        let mut g = Graph::new();
        let out = f(&mut g, p);
        g.scalar(out)
    };
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let h = 1e-6 * base[i].abs().max(1.0);
        let mut p = base.clone();
        p[i] += h;
        params.assign_flat(&p);
        let up = value(params);
        p[i] = base[i] - h;
        params.assign_flat(&p);
        let down = value(params);
        let n = (up - down) / (2.0 * h);
        worst = worst.max((grads[i] - n).abs() / (rtol * grads[i].abs().max(n.abs()) + 1e-7));
    }
    params.assign_flat(&base);
    worst
}

pub fn input(g: &mut Graph<f64>, seed: u64, rows: usize, cols: usize) -> Var {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    g.input(Tensor::from_fn(rows, cols, |_, _| r.sample(StandardNormal)))
}

/// Weighted sum so that every output coordinate matters.
pub fn project(g: &mut Graph<f64>, v: Var) -> Var {
    let (r, c) = g.shape(v);
    let w = g.input(Tensor::from_fn(r, c, |i, j| 0.3 + 0.1 * i as f64 - 0.2 * j as f64));
    let m = g.mul(v, w);
    g.sum_all(m)
}
