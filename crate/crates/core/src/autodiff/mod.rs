//! Reverse-mode automatic differentiation.
//!
//! Network code is written once against [`Graph`]. Running it on a [`Tape`]
//! records every op for a backward sweep; running it on [`Eager`] computes
//! values only and drops intermediates as soon as they go out of scope.
//! The tape is rebuilt for every forward pass.

pub mod op;

pub use op::{Op, OpKind};

use crate::error::{Error, Result};
use crate::tensor::kernels::{Padding, Resize};
use crate::tensor::{Scalar, Tensor};

/// Execution context for network forward passes.
pub trait Graph<T: Scalar> {
    type Node: Clone;

    /// A value that never receives a gradient.
    fn constant(&mut self, t: Tensor<T>) -> Self::Node;

    /// A trainable value. Contexts without gradients treat it as a constant.
    fn parameter(&mut self, t: Tensor<T>) -> Self::Node {
        self.constant(t)
    }

    fn value<'a>(&'a self, n: &'a Self::Node) -> &'a Tensor<T>;

    fn apply(&mut self, op: Op, inputs: &[&Self::Node]) -> Result<Self::Node>;

    fn conv2d(
        &mut self,
        x: &Self::Node,
        w: &Self::Node,
        b: Option<&Self::Node>,
        stride: usize,
        pad: Padding,
    ) -> Result<Self::Node> {
        match b {
            Some(b) => self.apply(Op::Conv2d { stride, pad }, &[x, w, b]),
            None => self.apply(Op::Conv2d { stride, pad }, &[x, w]),
        }
    }

    fn conv2d_transpose(&mut self, x: &Self::Node, w: &Self::Node, stride: usize, pad: Padding) -> Result<Self::Node> {
        self.apply(Op::Conv2dTranspose { stride, pad }, &[x, w])
    }

    fn resize(&mut self, x: &Self::Node, scale: Resize) -> Result<Self::Node> {
        self.apply(Op::Resize(scale), &[x])
    }

    fn leaky_relu(&mut self, x: &Self::Node, slope: f64) -> Result<Self::Node> {
        self.apply(Op::LeakyRelu { slope }, &[x])
    }

    fn tanh(&mut self, x: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::Tanh, &[x])
    }

    fn instance_norm(&mut self, x: &Self::Node, gamma: &Self::Node, beta: &Self::Node, eps: f64) -> Result<Self::Node> {
        self.apply(Op::InstanceNorm { eps }, &[x, gamma, beta])
    }

    fn add(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::Add, &[a, b])
    }

    fn sub(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::Sub, &[a, b])
    }

    fn mul(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::Mul, &[a, b])
    }

    fn mul_mask(&mut self, x: &Self::Node, mask: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::MulMask, &[x, mask])
    }

    fn concat_channels(&mut self, xs: &[&Self::Node]) -> Result<Self::Node> {
        self.apply(Op::ConcatChannels, xs)
    }

    fn pyr_down(&mut self, x: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::PyrDown, &[x])
    }

    fn pyr_up(&mut self, x: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::PyrUp, &[x])
    }

    fn crop(&mut self, x: &Self::Node, h: usize, w: usize) -> Result<Self::Node> {
        self.apply(Op::Crop { h, w }, &[x])
    }

    fn scale(&mut self, x: &Self::Node, k: f64) -> Result<Self::Node> {
        self.apply(Op::Scale(k), &[x])
    }

    fn add_scalar(&mut self, x: &Self::Node, k: f64) -> Result<Self::Node> {
        self.apply(Op::AddScalar(k), &[x])
    }

    fn square(&mut self, x: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::Square, &[x])
    }

    fn mean(&mut self, x: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::Mean, &[x])
    }

    fn sum(&mut self, x: &Self::Node) -> Result<Self::Node> {
        self.apply(Op::Sum, &[x])
    }
}

/// Value-only execution.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<T: Scalar> Graph<T> for Eager {
    type Node = Tensor<T>;

    fn constant(&mut self, t: Tensor<T>) -> Tensor<T> {
        t
    }

    fn value<'a>(&'a self, n: &'a Tensor<T>) -> &'a Tensor<T> {
        n
    }

    fn apply(&mut self, op: Op, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        op::forward(&op, inputs)
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

struct Node<T: Scalar> {
    op: Option<Op>,
    inputs: Vec<usize>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Append-only record of a forward pass.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), fault: None }
    }

    /// Test fixture: flips the sign of every gradient produced by ops of
    /// `kind` during backward.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: None, inputs: Vec::new(), value, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Op tags in recording order (leaves excluded).
    pub fn op_kinds(&self) -> impl Iterator<Item = OpKind> + '_ {
        self.nodes.iter().filter_map(|n| n.op.as_ref().map(Op::kind))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// depends on a `requires_grad` leaf. Each node is visited once, in
    /// reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.nodes[loss.0].value.shape();
        if !shape.is_scalar() {
            return Err(Error::NotScalar(shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(op) = &node.op else { continue };
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if node.inputs.iter().any(|&i| i >= id) {
                return Err(Error::Internal(format!("node {id} consumes a later node; graph is not topologically ordered")));
            }
            let xs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let wanted: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].needs_grad).collect();
            let mut input_grads = op::backward(op, &xs, &node.value, &g, &wanted)?;
            if self.fault == Some(op.kind()) {
                for gr in input_grads.iter_mut().flatten() {
                    *gr = gr.scale(-T::one());
                }
            }
            for (&i, gi) in node.inputs.iter().zip(input_grads) {
                let Some(gi) = gi else { continue };
                if gi.shape() != self.nodes[i].value.shape() {
                    return Err(Error::Internal(format!(
                        "{} produced gradient {} for input of shape {}",
                        op.kind(),
                        gi.shape(),
                        self.nodes[i].value.shape()
                    )));
                }
                grads[i] = Some(match grads[i].take() {
                    Some(acc) => acc.add(&gi)?,
                    None => gi,
                });
            }
        }
        // Only leaves keep their gradients.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if n.op.is_some() || !n.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

impl<T: Scalar> Graph<T> for Tape<T> {
    type Node = Var;

    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    fn parameter(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    fn value<'a>(&'a self, n: &'a Var) -> &'a Tensor<T> {
        self.get(*n)
    }

    fn apply(&mut self, op: Op, inputs: &[&Var]) -> Result<Var> {
        let xs: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = op::forward(&op, &xs)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { op: Some(op), inputs: inputs.iter().map(|v| v.0).collect(), value, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }
}

/// Gradients of `requires_grad` leaves after a backward sweep.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, tape: &Tape<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.get(v).shape()))
    }
}
