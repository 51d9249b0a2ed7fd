//! Differentiable building blocks shared by every model: MLP stacks,
//! gated/ungated recurrent cells and Gaussian parameter heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{GaussianVar, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::error::{check_dim, DvaeError, Result};
use crate::graph::{Activation, Graph, Var};
use crate::params::{glorot_uniform, orthogonal, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub dim: usize,
    pub activation: Activation,
}

/// Layer list in the `MLP(y, n₁, f₁, …, n_L, f_L)` sense.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layers: Vec<Layer>,
}

impl MlpSpec {
    pub fn new(layers: &[(usize, Activation)]) -> Self {
        Self {
            layers: layers
                .iter()
                .map(|&(dim, activation)| Layer { dim, activation })
                .collect(),
        }
    }

    /// Every layer `width` wide with the same activation.
    pub fn uniform(depth: usize, width: usize, activation: Activation) -> Self {
        Self::new(&vec![(width, activation); depth])
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(DvaeError::Config("MLP needs at least one layer".into()));
        }
        if self.layers.iter().any(|l| l.dim == 0) {
            return Err(DvaeError::Config("MLP layer width must be >= 1".into()));
        }
        Ok(())
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.dim)
    }

    /// Same depth and activations, every width replaced by `width`.
    pub fn with_width(&self, width: usize) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    dim: width,
                    activation: l.activation,
                })
                .collect(),
        }
    }
}

/// Affine map `x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        group: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = params.add(format!("{name}.w"), group, glorot_uniform(rng, in_dim, out_dim));
        let b = params.add(format!("{name}.b"), group, Tensor::zeros(1, out_dim));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamSet<T>, x: Var) -> Var {
        let w = g.param(p, self.w);
        let b = g.param(p, self.b);
        g.affine(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<(Linear, Activation)>,
    in_dim: usize,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        group: &str,
        in_dim: usize,
        spec: &MlpSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut d = in_dim;
        for (i, l) in spec.layers.iter().enumerate() {
            layers.push((
                Linear::new(params, rng, &format!("{name}.{i}"), group, d, l.dim),
                l.activation,
            ));
            d = l.dim;
        }
        Ok(Self { layers, in_dim })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(self.in_dim, |(l, _)| l.out_dim())
    }

    pub fn layers(&self) -> &[(Linear, Activation)] {
        &self.layers
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamSet<T>, x: Var) -> Result<Var> {
        check_dim("mlp input", self.in_dim, g.shape(x).1)?;
        let mut h = x;
        for (lin, act) in &self.layers {
            let a = lin.forward(g, p, h);
            h = g.activation(a, *act);
        }
        Ok(h)
    }

    /// Forward pass on a single plain vector.
    pub fn apply<T: Scalar>(&self, p: &ParamSet<T>, y: &[T]) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let x = g.input(Tensor::row_vector(y));
        let out = self.forward(&mut g, p, x)?;
        Ok(g.value(out).as_slice().to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecurrentCellConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// LSTM gating when true; plain `tanh` recurrence otherwise.
    pub gated: bool,
    pub direction: Direction,
}

impl RecurrentCellConfig {
    pub fn lstm(input_dim: usize, hidden_dim: usize, direction: Direction) -> Self {
        Self {
            input_dim,
            hidden_dim,
            gated: true,
            direction,
        }
    }
}

/// Recurrent state: hidden output `h` plus the LSTM memory `c` when gated.
#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub h: Var,
    pub c: Option<Var>,
}

/// LSTM (gate order input, forget, candidate, output; no peepholes, biases
/// initialized to zero) or an ungated `tanh` cell.
#[derive(Clone, Debug)]
pub struct RecurrentCell {
    cfg: RecurrentCellConfig,
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
}

impl RecurrentCell {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        group: &str,
        cfg: RecurrentCellConfig,
    ) -> Self {
        let h = cfg.hidden_dim;
        let gates = if cfg.gated { 4 } else { 1 };
        let wx = params.add(format!("{name}.wx"), group, glorot_uniform(rng, cfg.input_dim, gates * h));
        let blocks: Vec<Tensor<T>> = (0..gates).map(|_| orthogonal(rng, h)).collect();
        let refs: Vec<&Tensor<T>> = blocks.iter().collect();
        let wh = params.add(format!("{name}.wh"), group, Tensor::hcat(&refs));
        let b = params.add(format!("{name}.b"), group, Tensor::zeros(1, gates * h));
        Self { cfg, wx, wh, b }
    }

    pub fn config(&self) -> &RecurrentCellConfig {
        &self.cfg
    }

    pub fn hidden_dim(&self) -> usize {
        self.cfg.hidden_dim
    }

    /// Zero initial state for `batch` rows.
    pub fn initial_state<T: Scalar>(&self, g: &mut Graph<T>, batch: usize) -> CellState {
        let h = g.zeros(batch, self.cfg.hidden_dim);
        let c = self.cfg.gated.then(|| g.zeros(batch, self.cfg.hidden_dim));
        CellState { h, c }
    }

    pub fn step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamSet<T>,
        x: Var,
        state: &CellState,
    ) -> Result<CellState> {
        check_dim("recurrent cell input", self.cfg.input_dim, g.shape(x).1)?;
        let hd = self.cfg.hidden_dim;
        let wx = g.param(p, self.wx);
        let wh = g.param(p, self.wh);
        let b = g.param(p, self.b);
        let xin = g.affine(x, wx, Some(b));
        let rec = g.matmul(state.h, wh);
        let pre = g.add(xin, rec);
        if !self.cfg.gated {
            let h = g.tanh(pre);
            return Ok(CellState { h, c: None });
        }
        let i_pre = g.slice(pre, 0, hd);
        let f_pre = g.slice(pre, hd, hd);
        let c_pre = g.slice(pre, 2 * hd, hd);
        let o_pre = g.slice(pre, 3 * hd, hd);
        let i = g.sigmoid(i_pre);
        let f = g.sigmoid(f_pre);
        let cand = g.tanh(c_pre);
        let o = g.sigmoid(o_pre);
        let c_prev = state.c.expect("gated cell state carries memory");
        let keep = g.mul(f, c_prev);
        let write = g.mul(i, cand);
        let c = g.add(keep, write);
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        Ok(CellState { h, c: Some(c) })
    }
}

/// `prev + m ⊙ (next − prev)` with `m: B×1` ∈ {0, 1}.
fn masked<T: Scalar>(g: &mut Graph<T>, prev: Var, next: Var, m: Var) -> Var {
    let d = g.sub(next, prev);
    let d = g.mul_col(d, m);
    g.add(prev, d)
}

/// Runs `cell` over `inputs` and returns one hidden state per time step,
/// aligned with the inputs. A backward cell recurs from the last step down to
/// the first, so state `t` depends on inputs `t..T`. Optional per-step masks
/// (`B×1`, 1 = valid) freeze the state on padded frames.
pub fn recurrent_unroll<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamSet<T>,
    cell: &RecurrentCell,
    inputs: &[Var],
    h0: Option<CellState>,
    mask: Option<&[Var]>,
) -> Result<Vec<Var>> {
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(m) = mask {
        check_dim("recurrent mask length", inputs.len(), m.len())?;
    }
    let batch = g.shape(inputs[0]).0;
    let mut state = h0.unwrap_or_else(|| cell.initial_state(g, batch));
    let order: Vec<usize> = match cell.config().direction {
        Direction::Forward => (0..inputs.len()).collect(),
        Direction::Backward => (0..inputs.len()).rev().collect(),
    };
    let mut out = vec![None; inputs.len()];
    for t in order {
        let mut next = cell.step(g, p, inputs[t], &state)?;
        if let Some(m) = mask {
            next.h = masked(g, state.h, next.h, m[t]);
            if let (Some(cp), Some(cn)) = (state.c, next.c) {
                next.c = Some(masked(g, cp, cn, m[t]));
            }
        }
        out[t] = Some(next.h);
        state = next;
    }
    Ok(out.into_iter().map(|h| h.expect("every step visited")).collect())
}

/// Forward and backward unrolls concatenated per step: `[→h_t, ←h_t]`.
pub fn bidirectional_unroll<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamSet<T>,
    fwd: &RecurrentCell,
    bwd: &RecurrentCell,
    inputs: &[Var],
    mask: Option<&[Var]>,
) -> Result<Vec<Var>> {
    check_dim(
        "bidirectional input widths",
        fwd.config().input_dim,
        bwd.config().input_dim,
    )?;
    let f = recurrent_unroll(g, p, fwd, inputs, None, mask)?;
    let b = recurrent_unroll(g, p, bwd, inputs, None, mask)?;
    Ok(f.into_iter().zip(b).map(|(a, b)| g.concat(&[a, b])).collect())
}

/// Final affine layer emitting `[mean, log_var]`, log-variance clamped.
#[derive(Clone, Debug)]
pub struct GaussianHead {
    pub lin: Linear,
    out_dim: usize,
}

impl GaussianHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        group: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        Self {
            lin: Linear::new(params, rng, name, group, in_dim, 2 * out_dim),
            out_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.lin.in_dim()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamSet<T>, features: Var) -> Result<GaussianVar> {
        check_dim("gaussian head input", self.lin.in_dim(), g.shape(features).1)?;
        let out = self.lin.forward(g, p, features);
        let mean = g.slice(out, 0, self.out_dim);
        let lv = g.slice(out, self.out_dim, self.out_dim);
        let log_var = g.clamp(lv, T::lit(LOG_VAR_MIN), T::lit(LOG_VAR_MAX));
        Ok(GaussianVar { mean, log_var })
    }
}

/// Final affine layer emitting clamped log-variances only (power-spectrum
/// observation model).
#[derive(Clone, Debug)]
pub struct LogVarHead {
    pub lin: Linear,
}

impl LogVarHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        group: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        Self {
            lin: Linear::new(params, rng, name, group, in_dim, out_dim),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamSet<T>, features: Var) -> Result<Var> {
        check_dim("log-variance head input", self.lin.in_dim(), g.shape(features).1)?;
        let out = self.lin.forward(g, p, features);
        Ok(g.clamp(out, T::lit(LOG_VAR_MIN), T::lit(LOG_VAR_MAX)))
    }
}
