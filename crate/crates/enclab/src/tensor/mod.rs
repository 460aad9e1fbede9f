//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Operations executed against a [`Graph`] are recorded in execution order
//! (a Wengert tape); [`Graph::backward`] replays them in reverse exactly
//! once, accumulating gradients additively into every `requires_grad` leaf
//! reachable from the loss. A graph and its tensors belong to one thread;
//! independent graphs may run on independent threads.

mod gradcheck;
mod ops;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckParam, GradCheckReport};
pub use ops::Op;

use crate::error::{Error, Result};

/// Element type of a graph: `f32` for training, `f64` for gradient checking.
pub trait Element:
    Copy
    + Send
    + Sync
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn is_finite(self) -> bool;
    fn max(self, other: Self) -> Self;
}

impl Element for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn max(self, other: Self) -> Self {
        f32::max(self, other)
    }
}

impl Element for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn max(self, other: Self) -> Self {
        f64::max(self, other)
    }
}

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// One node of the tape: value, shape, optional gradient, and the operation
/// that produced it (with parent links).
#[derive(Debug, Clone)]
pub struct Tensor<T> {
    pub data: Vec<T>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
    pub(crate) op: Op,
}

impl<T: Element> Tensor<T> {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Execution tape. Nodes are stored in the order they were created, which
/// is a valid topological order by construction.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Tensor<T>>,
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Register an input tensor.
    pub fn leaf(&mut self, data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "leaf data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {:?}", shape)));
        }
        Ok(self.push(data, shape.to_vec(), requires_grad, Op::Leaf))
    }

    /// Convenience for untracked constants.
    pub fn constant(&mut self, data: Vec<T>, shape: &[usize]) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: T) -> TensorId {
        self.push(vec![v], vec![1], false, Op::Leaf)
    }

    pub(crate) fn push(
        &mut self,
        data: Vec<T>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Op,
    ) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Tensor {
            data,
            shape,
            requires_grad,
            grad: None,
            op,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].numel()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub(crate) fn node(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0]
    }

    /// Reset every allocated gradient buffer to exact zeros.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|v| *v = T::ZERO);
            }
        }
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Visits nodes in reverse execution order exactly once. Gradients flow
    /// only into subgraphs that require them; leaves not reachable from the
    /// loss keep `grad = None`.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(Error::Graph(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.nodes[loss.0].grad = Some(vec![T::ONE]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            // Intermediate gradients are consumed here; only leaves keep theirs.
            let grad = self.nodes[i].grad.take().expect("checked above");
            self.propagate(TensorId(i), &op, &grad)?;
        }
        Ok(())
    }

    /// Allocate-or-accumulate a parent gradient, skipping parents that do
    /// not require gradients.
    pub(crate) fn accumulate(&mut self, id: TensorId, contribution: &[T]) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        let grad = node
            .grad
            .get_or_insert_with(|| vec![T::ZERO; contribution.len()]);
        for (g, c) in grad.iter_mut().zip(contribution) {
            *g += *c;
        }
    }

    /// Same as [`Graph::accumulate`] but via an index/value visitor, for ops
    /// whose contribution is naturally scattered.
    pub(crate) fn accumulate_scatter<F>(&mut self, id: TensorId, fill: F)
    where
        F: FnOnce(&mut [T]),
    {
        let numel = self.nodes[id.0].numel();
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        let grad = node.grad.get_or_insert_with(|| vec![T::ZERO; numel]);
        fill(grad);
    }
}
