use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    /// Coarse submodule label (e.g. `encoder`, `decoder`, `lds`), used for
    /// freezing and for per-submodule parameter counts.
    pub group: String,
    pub value: Tensor<T>,
}

/// Flat, ordered store of every learnable tensor of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            group: group.into(),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Scalar counts per group, in first-appearance order.
    pub fn counts_by_group(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for e in &self.entries {
            match out.iter_mut().find(|(g, _)| *g == e.group) {
                Some((_, n)) => *n += e.value.len(),
                None => out.push((e.group.clone(), e.value.len())),
            }
        }
        out
    }

    /// All parameter values flattened in id order.
    pub fn flatten(&self) -> Vec<T> {
        self.entries
            .iter()
            .flat_map(|e| e.value.as_slice().iter().copied())
            .collect()
    }

    /// Inverse of [`flatten`](Self::flatten); panics on length mismatch.
    pub fn assign_flat(&mut self, values: &[T]) {
        assert_eq!(values.len(), self.num_scalars(), "flat parameter length");
        let mut off = 0;
        for e in &mut self.entries {
            let n = e.value.len();
            e.value.as_mut_slice().copy_from_slice(&values[off..off + n]);
            off += n;
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    group: e.group.clone(),
                    value: e.value.cast(),
                })
                .collect(),
        }
    }
}

/// Glorot-uniform matrix of shape `fan_in × fan_out`.
pub fn glorot_uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    Tensor::from_fn(fan_in, fan_out, |_, _| T::lit(dist.sample(rng)))
}

pub fn gaussian<T: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor<T> {
    Tensor::from_fn(rows, cols, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        T::lit(v * scale)
    })
}

/// Random `n × n` orthogonal matrix (Gram-Schmidt on a Gaussian draw).
pub fn orthogonal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize) -> Tensor<T> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for u in &cols {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= d * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            cols.push(v);
        }
    }
    Tensor::from_fn(n, n, |r, c| T::lit(cols[c][r]))
}
