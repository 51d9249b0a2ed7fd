//! Small dense symmetric-positive-definite routines used by the Kalman
//! machinery and the differentiable filter.

use crate::error::{DvaeError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower-triangular Cholesky factor `L` with `A = L·Lᵀ`.
pub fn cholesky<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(DvaeError::dims("cholesky: square matrix", n, a.cols()));
    }
    let mut l = Tensor::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return Err(DvaeError::Numerical(format!(
                "matrix not positive definite (pivot {j} = {d})"
            )));
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L·Lᵀ·X = B` given the Cholesky factor.
pub fn cholesky_solve<T: Scalar>(l: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let n = l.rows();
    assert_eq!(b.rows(), n);
    let m = b.cols();
    let mut x = b.clone();
    for c in 0..m {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in i + 1..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

pub fn spd_inverse<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let l = cholesky(a)?;
    let mut inv = cholesky_solve(&l, &Tensor::identity(a.rows()));
    symmetrize(&mut inv);
    Ok(inv)
}

pub fn spd_logdet<T: Scalar>(a: &Tensor<T>) -> Result<T> {
    let l = cholesky(a)?;
    Ok((0..a.rows()).map(|i| l[(i, i)].ln()).sum::<T>() * T::lit(2.0))
}

/// Replaces `a` by `(a + aᵀ)/2`.
pub fn symmetrize<T: Scalar>(a: &mut Tensor<T>) {
    let n = a.rows();
    let half = T::lit(0.5);
    for i in 0..n {
        for j in i + 1..n {
            let v = (a[(i, j)] + a[(j, i)]) * half;
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    a.zip_map(b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    a.zip_map(b, |x, y| x - y)
}

/// `a·b·aᵀ`.
pub fn sandwich<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    a.matmul(b).matmul(&a.transpose())
}

pub fn diag<T: Scalar>(values: &[T]) -> Tensor<T> {
    let n = values.len();
    let mut out = Tensor::zeros(n, n);
    for (i, &v) in values.iter().enumerate() {
        out[(i, i)] = v;
    }
    out
}
