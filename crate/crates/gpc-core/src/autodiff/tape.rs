//! Wengert-list reverse-mode differentiation.
//!
//! A [`Tape`] records every operation as a node holding its inputs and cached
//! output. Node ids grow monotonically, so the recording order is already a
//! topological order and [`Tape::backward`] is a single reverse sweep that
//! visits each node exactly once.
//!
//! Operations accept any mix of taped and plain tensors. A plain tensor fed
//! into an otherwise taped operation is registered as a constant; if no input
//! is taped at all, the operation evaluates eagerly and records nothing.

use crate::error::{GpcError, Result};

use super::ops;
use super::tensor::{NodeId, Shape, Tensor};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    Relu(NodeId),
    SumOfSquares(NodeId),
    QuadraticForm(NodeId, NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of one scalar root with respect to every node it depends on.
///
/// Indexed by the node handle a tensor carries; nodes the root does not
/// depend on have no entry and read back as zero.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `t`, if `t` is taped and reachable from the
    /// root. `None` for plain tensors and for unreachable nodes.
    pub fn wrt(&self, t: &Tensor) -> Option<&Tensor> {
        self.grads.get(t.node()?)?.as_ref()
    }

    /// Gradient with respect to `t`, with zeros standing in for nodes the
    /// root does not depend on.
    pub fn wrt_or_zero(&self, t: &Tensor) -> Tensor {
        self.wrt(t)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()))
    }
}

/// Recording tape. One tape corresponds to one differentiated expression;
/// build, call [`Tape::backward`], then drop it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Tensor {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            value: value.detached(),
        });
        value.with_node(id)
    }

    /// Register an input to differentiate with respect to. The returned
    /// tensor carries the node handle used to look its gradient up later.
    pub fn leaf(&mut self, value: Tensor) -> Tensor {
        self.push(Op::Leaf, value.detached())
    }

    /// Node id for `t`, registering it as a constant if it is not yet taped.
    fn id_of(&mut self, t: &Tensor) -> NodeId {
        match t.node() {
            Some(id) => {
                debug_assert!(id < self.nodes.len(), "tensor from another tape");
                id
            }
            None => {
                let registered = self.push(Op::Constant, t.detached());
                registered.node().expect("just pushed")
            }
        }
    }

    fn binary(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        value: Tensor,
        make: impl FnOnce(NodeId, NodeId) -> Op,
    ) -> Tensor {
        if a.node().is_none() && b.node().is_none() {
            return value;
        }
        let (ia, ib) = (self.id_of(a), self.id_of(b));
        self.push(make(ia, ib), value)
    }

    fn unary(&mut self, a: &Tensor, value: Tensor, make: impl FnOnce(NodeId) -> Op) -> Tensor {
        match a.node() {
            None => value,
            Some(id) => self.push(make(id), value),
        }
    }

    /// Matrix-matrix or matrix-vector product.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let value = ops::matmul(a, b)?;
        Ok(self.binary(a, b, value, Op::MatMul))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let value = ops::add(a, b)?;
        Ok(self.binary(a, b, value, Op::Add))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let value = ops::sub(a, b)?;
        Ok(self.binary(a, b, value, Op::Sub))
    }

    pub fn hadamard(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let value = ops::hadamard(a, b)?;
        Ok(self.binary(a, b, value, Op::Hadamard))
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        let value = ops::scale(a, c);
        self.unary(a, value, |id| Op::Scale(id, c))
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        let value = ops::transpose(a)?;
        Ok(self.unary(a, value, Op::Transpose))
    }

    pub fn relu(&mut self, a: &Tensor) -> Tensor {
        let value = ops::relu(a);
        self.unary(a, value, Op::Relu)
    }

    /// Sum of squared entries, as a scalar.
    pub fn sum_of_squares(&mut self, a: &Tensor) -> Tensor {
        let value = ops::sum_of_squares(a);
        self.unary(a, value, Op::SumOfSquares)
    }

    /// eps^T pi eps, as a scalar.
    pub fn quadratic_form(&mut self, eps: &Tensor, pi: &Tensor) -> Result<Tensor> {
        let value = ops::quadratic_form(eps, pi)?;
        Ok(self.binary(eps, pi, value, Op::QuadraticForm))
    }

    /// Reverse sweep from a scalar root. Returns the gradient of the root
    /// with respect to every node it depends on.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        if root.shape() != Shape::Scalar {
            return Err(GpcError::NonScalarRoot(format!(
                "root has shape {}",
                root.shape()
            )));
        }
        let root_id = root
            .node()
            .ok_or_else(|| GpcError::NonScalarRoot("root is not registered on this tape".into()))?;
        if root_id >= self.nodes.len() {
            return Err(GpcError::NonScalarRoot(format!(
                "root node {root_id} is not on this tape"
            )));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root_id] = Some(Tensor::scalar(1.0));

        for id in (0..=root_id).rev() {
            let Some(up) = grads[id].take() else { continue };
            self.propagate(id, &up, &mut grads)?;
            grads[id] = Some(up);
        }

        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) -> Result<()> {
        match &mut grads[id] {
            Some(existing) => {
                *existing = ops::add(existing, &delta)?;
            }
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn propagate(&self, id: NodeId, up: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        match node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(ia, ib) => {
                let a = &self.nodes[ia].value;
                let b = &self.nodes[ib].value;
                match (a.shape(), b.shape()) {
                    (Shape::Matrix(..), Shape::Matrix(..)) => {
                        let da = ops::matmul(up, &ops::transpose(b)?)?;
                        let db = ops::matmul(&ops::transpose(a)?, up)?;
                        Self::accumulate(grads, ia, da)?;
                        Self::accumulate(grads, ib, db)?;
                    }
                    (Shape::Matrix(..), Shape::Vector(_)) => {
                        let da = ops::outer(up, b)?;
                        let db = ops::matmul(&ops::transpose(a)?, up)?;
                        Self::accumulate(grads, ia, da)?;
                        Self::accumulate(grads, ib, db)?;
                    }
                    _ => unreachable!("matmul recorded with invalid shapes"),
                }
            }
            Op::Add(ia, ib) => {
                Self::accumulate(grads, ia, up.detached())?;
                Self::accumulate(grads, ib, up.detached())?;
            }
            Op::Sub(ia, ib) => {
                Self::accumulate(grads, ia, up.detached())?;
                Self::accumulate(grads, ib, ops::scale(up, -1.0))?;
            }
            Op::Hadamard(ia, ib) => {
                let a = &self.nodes[ia].value;
                let b = &self.nodes[ib].value;
                Self::accumulate(grads, ia, ops::hadamard(up, b)?)?;
                Self::accumulate(grads, ib, ops::hadamard(up, a)?)?;
            }
            Op::Scale(ia, c) => {
                Self::accumulate(grads, ia, ops::scale(up, c))?;
            }
            Op::Transpose(ia) => {
                Self::accumulate(grads, ia, ops::transpose(up)?)?;
            }
            Op::Relu(ia) => {
                let a = &self.nodes[ia].value;
                let mask = Tensor::new(
                    a.shape(),
                    a.data()
                        .iter()
                        .map(|x| if *x > 0.0 { 1.0 } else { 0.0 })
                        .collect(),
                );
                Self::accumulate(grads, ia, ops::hadamard(up, &mask)?)?;
            }
            Op::SumOfSquares(ia) => {
                let a = &self.nodes[ia].value;
                Self::accumulate(grads, ia, ops::scale(a, 2.0 * up.scalar_value()))?;
            }
            Op::QuadraticForm(ie, ip) => {
                let eps = &self.nodes[ie].value;
                let pi = &self.nodes[ip].value;
                let u = up.scalar_value();
                // d/d eps = (pi + pi^T) eps, d/d pi = eps eps^T.
                let sym = ops::add(pi, &ops::transpose(pi)?)?;
                let de = ops::scale(&ops::matmul(&sym, eps)?, u);
                let dp = ops::scale(&ops::outer(eps, eps)?, u);
                Self::accumulate(grads, ie, de)?;
                Self::accumulate(grads, ip, dp)?;
            }
        }
        Ok(())
    }
}
