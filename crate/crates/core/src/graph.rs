//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation is evaluated eagerly when it is recorded; `backward`
//! replays the tape in reverse. Shape errors inside the graph are programming
//! errors and panic; public model entry points validate their inputs first.

use crate::error::Result;
use crate::linalg;
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{gemm_into, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
    Identity,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Affine { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, T, T),
    Concat(Vec<Var>),
    Slice(Var, usize),
    SumCols(Var),
    SumAll(Var),
    Transpose(Var),
    SpdInverse(Var),
    SpdLogDet(Var),
    SoftmaxRows(Var),
    BroadcastRows(Var),
    ScaleBy(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    params: Vec<Option<Tensor<T>>>,
    leaves: Vec<(Var, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to a leaf created by [`Graph::variable`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.iter().find(|(l, _)| *l == v).map(|(_, g)| g)
    }

    /// Dense per-parameter gradients, zero where a parameter was unused.
    pub fn dense(&self, params: &ParamSet<T>) -> Vec<Tensor<T>> {
        params
            .ids()
            .map(|id| match self.param(id) {
                Some(g) => g.clone(),
                None => {
                    let (r, c) = params.get(id).shape();
                    Tensor::zeros(r, c)
                }
            })
            .collect()
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// The single entry of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.shape(), (1, 1), "scalar() on non-scalar node");
        t[(0, 0)]
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.input(Tensor::zeros(rows, cols))
    }

    /// Parameter leaf; each parameter is copied into the graph at most once.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(params.get(id).clone(), Op::Param(id), true);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// `x·W + b` with `x: B×in`, `W: in×out`, `b: 1×out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (bx, kin) = self.shape(x);
        let (kw, out) = self.shape(w);
        assert_eq!(kin, kw, "affine input width {kin} vs weight rows {kw}");
        let mut y = Tensor::zeros(bx, out);
        gemm_into(self.value(x), false, self.value(w), false, &mut y, T::zero());
        if let Some(b) = b {
            let bias = self.value(b);
            assert_eq!(bias.shape(), (1, out), "affine bias shape");
            let bias = bias.as_slice().to_vec();
            for r in 0..bx {
                for (o, &bb) in y.row_mut(r).iter_mut().zip(&bias) {
                    *o += bb;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.map_or(false, |b| self.ng(b));
        self.push(y, Op::Affine { x, w, b }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(y, Op::Mul(a, b), ng)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row shape");
        let rv = self.value(row).as_slice().to_vec();
        let mut y = self.value(a).clone();
        for i in 0..r {
            for (o, &v) in y.row_mut(i).iter_mut().zip(&rv) {
                *o += v;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(y, Op::AddRow(a, row), ng)
    }

    /// Multiplies row `i` of `a` by `col[i]` (`col: B×1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (r, _) = self.shape(a);
        assert_eq!(self.shape(col), (r, 1), "mul_col shape");
        let cv = self.value(col).as_slice().to_vec();
        let mut y = self.value(a).clone();
        for (i, &s) in cv.iter().enumerate() {
            y.row_mut(i).iter_mut().for_each(|o| *o *= s);
        }
        let ng = self.ng(a) || self.ng(col);
        self.push(y, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let y = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(y, Op::Scale(a, s), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    /// `a + c` elementwise.
    pub fn offset(&mut self, a: Var, c: T) -> Var {
        let y = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(y, Op::Offset(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|x| x.tanh());
        let ng = self.ng(a);
        self.push(y, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(y, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|x| x.max(T::zero()));
        let ng = self.ng(a);
        self.push(y, Op::Relu(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let y = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(y, Op::Softplus(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|x| x.exp());
        let ng = self.ng(a);
        self.push(y, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|x| x.ln());
        let ng = self.ng(a);
        self.push(y, Op::Log(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(y, Op::Square(a), ng)
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let y = self.value(a).map(|x| {
            if x.is_nan() {
                x
            } else {
                x.max(lo).min(hi)
            }
        });
        let ng = self.ng(a);
        self.push(y, Op::Clamp(a, lo, hi), ng)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        match act {
            Activation::Relu => self.relu(a),
            Activation::Sigmoid => self.sigmoid(a),
            Activation::Tanh => self.tanh(a),
            Activation::Softplus => self.softplus(a),
            Activation::Identity => a,
        }
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        if parts.len() == 1 {
            return parts[0];
        }
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::hcat(&refs);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(y, Op::Concat(parts.to_vec()), ng)
    }

    /// Columns `start..start + len`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let y = self.value(a).slice_cols(start, len);
        let ng = self.ng(a);
        self.push(y, Op::Slice(a, start), ng)
    }

    /// Row sums: `B×n → B×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let y = Tensor::from_fn(t.rows(), 1, |r, _| t.row(r).iter().copied().sum());
        let ng = self.ng(a);
        self.push(y, Op::SumCols(a), ng)
    }

    /// Sum of all entries: `→ 1×1`.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let y = Tensor::filled(1, 1, self.value(a).sum());
        let ng = self.ng(a);
        self.push(y, Op::SumAll(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let y = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(y, Op::Transpose(a), ng)
    }

    /// Inverse of a symmetric positive-definite matrix.
    pub fn spd_inverse(&mut self, a: Var) -> Result<Var> {
        let y = linalg::spd_inverse(self.value(a))?;
        let ng = self.ng(a);
        Ok(self.push(y, Op::SpdInverse(a), ng))
    }

    /// `ln det A` of a symmetric positive-definite matrix, as a 1×1 node.
    pub fn spd_logdet(&mut self, a: Var) -> Result<Var> {
        let y = Tensor::filled(1, 1, linalg::spd_logdet(self.value(a))?);
        let ng = self.ng(a);
        Ok(self.push(y, Op::SpdLogDet(a), ng))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut y = t.clone();
        for r in 0..y.rows() {
            let row = y.row_mut(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let ng = self.ng(a);
        self.push(y, Op::SoftmaxRows(a), ng)
    }

    /// Repeats a `1×n` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows(), 1, "broadcast_rows expects a single row");
        let y = Tensor::from_fn(rows, t.cols(), |_, c| t[(0, c)]);
        let ng = self.ng(a);
        self.push(y, Op::BroadcastRows(a), ng)
    }

    /// Multiplies every entry of `a` by the 1×1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let y = self.value(a).map(|x| x * sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(y, Op::ScaleBy(a, s), ng)
    }

    /// Reverse pass from `root` (any shape; seeded with ones).
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let n = root.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        let (r, c) = self.shape(root);
        grads[root.0] = Some(Tensor::filled(r, c, T::one()));
        let mut out = Gradients {
            params: Vec::new(),
            leaves: Vec::new(),
        };

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Leaf => out.leaves.push((Var(i), gy)),
                Op::Param(id) => {
                    if out.params.len() <= id.index() {
                        out.params.resize_with(id.index() + 1, || None);
                    }
                    out.params[id.index()] = Some(gy);
                }
                Op::Affine { x, w, b } => {
                    self.acc_product(&mut grads, *x, (&gy, false), (self.value(*w), true));
                    self.acc_product(&mut grads, *w, (self.value(*x), true), (&gy, false));
                    if let Some(b) = b {
                        if self.ng(*b) {
                            self.acc(&mut grads, *b, col_sums(&gy));
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    self.acc_product(&mut grads, *a, (&gy, false), (self.value(*b), true));
                    self.acc_product(&mut grads, *b, (self.value(*a), true), (&gy, false));
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        self.acc(&mut grads, *a, gy.clone());
                    }
                    if self.ng(*b) {
                        self.acc(&mut grads, *b, gy);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        self.acc(&mut grads, *a, gy.clone());
                    }
                    if self.ng(*b) {
                        self.acc(&mut grads, *b, gy.map(|g| -g));
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        let g = gy.zip_map(self.value(*b), |g, v| g * v);
                        self.acc(&mut grads, *a, g);
                    }
                    if self.ng(*b) {
                        let g = gy.zip_map(self.value(*a), |g, v| g * v);
                        self.acc(&mut grads, *b, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        self.acc(&mut grads, *row, col_sums(&gy));
                    }
                    if self.ng(*a) {
                        self.acc(&mut grads, *a, gy);
                    }
                }
                Op::MulCol(a, col) => {
                    let cv = self.value(*col);
                    if self.ng(*col) {
                        let av = self.value(*a);
                        let g = Tensor::from_fn(gy.rows(), 1, |r, _| {
                            gy.row(r).iter().zip(av.row(r)).map(|(&g, &x)| g * x).sum()
                        });
                        self.acc(&mut grads, *col, g);
                    }
                    if self.ng(*a) {
                        let mut g = gy;
                        for r in 0..g.rows() {
                            let s = cv[(r, 0)];
                            g.row_mut(r).iter_mut().for_each(|v| *v *= s);
                        }
                        self.acc(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    self.acc(&mut grads, *a, gy.map(|g| g * s));
                }
                Op::Offset(a) => self.acc(&mut grads, *a, gy),
                Op::Tanh(a) => {
                    let g = gy.zip_map(y, |g, y| g * (T::one() - y * y));
                    self.acc(&mut grads, *a, g);
                }
                Op::Sigmoid(a) => {
                    let g = gy.zip_map(y, |g, y| g * y * (T::one() - y));
                    self.acc(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let g = gy.zip_map(y, |g, y| if y > T::zero() { g } else { T::zero() });
                    self.acc(&mut grads, *a, g);
                }
                Op::Softplus(a) => {
                    let g = gy.zip_map(self.value(*a), |g, x| g * sigmoid(x));
                    self.acc(&mut grads, *a, g);
                }
                Op::Exp(a) => {
                    let g = gy.zip_map(y, |g, y| g * y);
                    self.acc(&mut grads, *a, g);
                }
                Op::Log(a) => {
                    let g = gy.zip_map(self.value(*a), |g, x| g / x);
                    self.acc(&mut grads, *a, g);
                }
                Op::Square(a) => {
                    let g = gy.zip_map(self.value(*a), |g, x| g * (x + x));
                    self.acc(&mut grads, *a, g);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let g = gy.zip_map(self.value(*a), |g, x| {
                        if x >= lo && x <= hi {
                            g
                        } else {
                            T::zero()
                        }
                    });
                    self.acc(&mut grads, *a, g);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.ng(p) {
                            self.acc(&mut grads, p, gy.slice_cols(off, w));
                        }
                        off += w;
                    }
                }
                Op::Slice(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut g = Tensor::zeros(r, c);
                    let w = gy.cols();
                    for i in 0..r {
                        g.row_mut(i)[*start..*start + w].copy_from_slice(gy.row(i));
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::SumCols(a) => {
                    let (r, c) = self.shape(*a);
                    let g = Tensor::from_fn(r, c, |i, _| gy[(i, 0)]);
                    self.acc(&mut grads, *a, g);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.shape(*a);
                    self.acc(&mut grads, *a, Tensor::filled(r, c, gy[(0, 0)]));
                }
                Op::Transpose(a) => self.acc(&mut grads, *a, gy.transpose()),
                Op::SpdInverse(a) => {
                    // d(A⁻¹) = −A⁻¹ dA A⁻¹  ⇒  gA = −Yᵀ gY Yᵀ
                    let yt = y.transpose();
                    let g = yt.matmul(&gy).matmul(&yt).map(|v| -v);
                    self.acc(&mut grads, *a, g);
                }
                Op::SpdLogDet(a) => {
                    let inv = linalg::spd_inverse(self.value(*a))
                        .expect("matrix was positive definite in the forward pass");
                    let s = gy[(0, 0)];
                    self.acc(&mut grads, *a, inv.map(|v| v * s));
                }
                Op::SoftmaxRows(a) => {
                    let mut g = gy.clone();
                    for r in 0..g.rows() {
                        let dot: T = gy.row(r).iter().zip(y.row(r)).map(|(&a, &b)| a * b).sum();
                        for (o, (&gg, &yy)) in g.row_mut(r).iter_mut().zip(gy.row(r).iter().zip(y.row(r))) {
                            *o = yy * (gg - dot);
                        }
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::BroadcastRows(a) => self.acc(&mut grads, *a, col_sums(&gy)),
                Op::ScaleBy(a, s) => {
                    let sv = self.scalar(*s);
                    if self.ng(*s) {
                        let d: T = gy
                            .as_slice()
                            .iter()
                            .zip(self.value(*a).as_slice())
                            .map(|(&g, &x)| g * x)
                            .sum();
                        self.acc(&mut grads, *s, Tensor::filled(1, 1, d));
                    }
                    if self.ng(*a) {
                        self.acc(&mut grads, *a, gy.map(|g| g * sv));
                    }
                }
            }
        }
        out
    }

    #[inline]
    /// Adds `op(a)·op(b)` to the gradient of `v` without a temporary.
    fn acc_product(&self, grads: &mut [Option<Tensor<T>>], v: Var, a: (&Tensor<T>, bool), b: (&Tensor<T>, bool)) {
        if !self.ng(v) {
            return;
        }
        let rows = if a.1 { a.0.cols() } else { a.0.rows() };
        let cols = if b.1 { b.0.rows() } else { b.0.cols() };
        match &mut grads[v.0] {
            Some(existing) => gemm_into(a.0, a.1, b.0, b.1, existing, T::one()),
            slot @ None => {
                let mut g = Tensor::zeros(rows, cols);
                gemm_into(a.0, a.1, b.0, b.1, &mut g, T::zero());
                *slot = Some(g);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

fn col_sums<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (o, &v) in out.as_mut_slice().iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out
}
