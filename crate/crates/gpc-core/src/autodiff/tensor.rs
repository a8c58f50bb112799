//! Dense f64 tensors of rank <= 2, the substrate for all math in the engine.

use std::fmt;

use crate::error::{GpcError, Result};

/// Index of a node on a [`Tape`](super::Tape).
pub type NodeId = usize;

/// Shape of a tensor: scalar, vector, or row-major matrix. Rank is capped at 2
/// by construction; the engine never needs batching or higher-rank data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    /// Number of stored elements.
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Scalar => vec![],
            Shape::Vector(n) => vec![n],
            Shape::Matrix(r, c) => vec![r, c],
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Shape::Scalar => write!(f, "scalar"),
            Shape::Vector(n) => write!(f, "[{n}]"),
            Shape::Matrix(r, c) => write!(f, "[{r}x{c}]"),
        }
    }
}

/// Dense tensor with an optional handle onto the tape that produced it.
///
/// Data is row-major. A tensor with `node == None` is a plain value; taped
/// tensors additionally participate in reverse-mode differentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    node: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.len(),
            data.len(),
            "tensor data length {} does not match shape {}",
            data.len(),
            shape
        );
        Tensor {
            shape,
            data,
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(Shape::Scalar, vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(Shape::Vector(n), data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(Shape::Matrix(rows, cols), data)
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::new(shape, vec![0.0; shape.len()])
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::matrix(n, n, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Tape handle, if this tensor was produced by (or registered on) a tape.
    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub(crate) fn with_node(mut self, node: NodeId) -> Self {
        self.node = Some(node);
        self
    }

    /// Copy of this tensor with the tape handle stripped.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.clone(),
            node: None,
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.shape == Shape::Scalar
    }

    /// Value of a scalar tensor.
    pub fn scalar_value(&self) -> f64 {
        assert!(self.is_scalar(), "scalar_value on shape {}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm of the flattened data.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Matrix element accessor (row-major).
    pub fn at(&self, row: usize, col: usize) -> f64 {
        match self.shape {
            Shape::Matrix(_, c) => self.data[row * c + col],
            _ => panic!("at() on non-matrix shape {}", self.shape),
        }
    }

    pub(crate) fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> GpcError {
        GpcError::ShapeMismatch {
            op,
            lhs: lhs.shape.to_string(),
            rhs: rhs.shape.to_string(),
        }
    }

    pub(crate) fn require_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
        if a.shape != b.shape {
            return Err(Tensor::shape_err(op, a, b));
        }
        Ok(())
    }
}
