//! Shared numeric kernels. Both the tape's forward pass and plain
//! (non-differentiated) tensor math in the rest of the crate go through these,
//! so a value computed on-tape is bitwise identical to one computed off-tape.

use crate::error::Result;

use super::tensor::{Shape, Tensor};

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match (a.shape(), b.shape()) {
        (Shape::Matrix(m, n), Shape::Matrix(n2, p)) if n == n2 => {
            let mut out = vec![0.0; m * p];
            for i in 0..m {
                for k in 0..n {
                    let aik = a.data()[i * n + k];
                    if aik == 0.0 {
                        continue;
                    }
                    for j in 0..p {
                        out[i * p + j] += aik * b.data()[k * p + j];
                    }
                }
            }
            Ok(Tensor::matrix(m, p, out))
        }
        (Shape::Matrix(m, n), Shape::Vector(n2)) if n == n2 => {
            let mut out = vec![0.0; m];
            for (i, slot) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += a.data()[i * n + k] * b.data()[k];
                }
                *slot = acc;
            }
            Ok(Tensor::vector(out))
        }
        _ => Err(Tensor::shape_err("matmul", a, b)),
    }
}

pub(crate) fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Tensor::require_same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::new(a.shape(), data))
}

pub(crate) fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Tensor::require_same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Ok(Tensor::new(a.shape(), data))
}

pub(crate) fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Tensor::require_same_shape("hadamard", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Ok(Tensor::new(a.shape(), data))
}

pub(crate) fn scale(a: &Tensor, c: f64) -> Tensor {
    Tensor::new(a.shape(), a.data().iter().map(|x| x * c).collect())
}

pub(crate) fn transpose(a: &Tensor) -> Result<Tensor> {
    match a.shape() {
        Shape::Matrix(r, c) => {
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a.data()[i * c + j];
                }
            }
            Ok(Tensor::matrix(c, r, out))
        }
        _ => Err(crate::error::GpcError::ShapeMismatch {
            op: "transpose",
            lhs: a.shape().to_string(),
            rhs: "matrix".into(),
        }),
    }
}

/// relu'(0) is taken to be 0, so the subgradient used at the kink matches the
/// forward kernel exactly: gradients flow only where the input is positive.
pub(crate) fn relu(a: &Tensor) -> Tensor {
    Tensor::new(
        a.shape(),
        a.data()
            .iter()
            .map(|x| if *x > 0.0 { *x } else { 0.0 })
            .collect(),
    )
}

pub(crate) fn sum_of_squares(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data().iter().map(|x| x * x).sum())
}

/// eps^T pi eps for a vector `eps` and square matrix `pi`.
pub(crate) fn quadratic_form(eps: &Tensor, pi: &Tensor) -> Result<Tensor> {
    match (eps.shape(), pi.shape()) {
        (Shape::Vector(n), Shape::Matrix(r, c)) if n == r && n == c => {
            let mut acc = 0.0;
            for i in 0..n {
                let mut row = 0.0;
                for j in 0..n {
                    row += pi.data()[i * n + j] * eps.data()[j];
                }
                acc += eps.data()[i] * row;
            }
            Ok(Tensor::scalar(acc))
        }
        _ => Err(Tensor::shape_err("quadratic_form", eps, pi)),
    }
}

/// Outer product of two vectors: `out[i][j] = a[i] * b[j]`.
pub(crate) fn outer(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match (a.shape(), b.shape()) {
        (Shape::Vector(m), Shape::Vector(n)) => {
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] = a.data()[i] * b.data()[j];
                }
            }
            Ok(Tensor::matrix(m, n, out))
        }
        _ => Err(Tensor::shape_err("outer", a, b)),
    }
}

/// Plain (non-differentiated) tensor arithmetic. The differentiable versions
/// live on [`Tape`](super::Tape); these are for code paths where no gradient
/// is ever needed, such as rollouts and metric computation.
impl Tensor {
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        matmul(self, rhs)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        add(self, rhs)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        sub(self, rhs)
    }

    pub fn hadamard(&self, rhs: &Tensor) -> Result<Tensor> {
        hadamard(self, rhs)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        scale(self, c)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        transpose(self)
    }

    pub fn relu(&self) -> Tensor {
        relu(self)
    }

    pub fn sum_of_squares(&self) -> f64 {
        sum_of_squares(self).scalar_value()
    }

    pub fn quadratic_form(&self, pi: &Tensor) -> Result<f64> {
        quadratic_form(self, pi).map(|t| t.scalar_value())
    }

    pub fn outer(&self, rhs: &Tensor) -> Result<Tensor> {
        outer(self, rhs)
    }
}
