//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in
//! execution order, which is already a topological order. [`Graph::backward`]
//! walks the tape once in reverse, so each node is visited exactly once.
//!
//! Leaves keep their gradients across calls to `backward` (they accumulate);
//! interior gradients are released as soon as they have been propagated.

mod conv;
mod elementwise;
pub mod gradcheck;
mod linalg;
mod norm;
mod sample;
mod shape;

pub use gradcheck::{grad_check, GradCheckReport};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything an op's backward rule may look at.
pub(crate) struct BackwardCx<'a, T: Scalar> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a [T],
    /// `needs[i]` is false when input `i` does not require a gradient.
    pub needs: Vec<bool>,
}

/// Vector-Jacobian product of one recorded op.
pub(crate) trait Backward<T: Scalar> {
    /// One entry per input; `None` contributes nothing.
    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    backward: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
    op: &'static str,
}

/// The recording tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite: false,
        }
    }

    /// When enabled, every op output is checked and NaN/Inf becomes
    /// [`Error::NonFinite`].
    pub fn with_finite_check(mut self, enabled: bool) -> Self {
        self.check_finite = enabled;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `t` as a leaf. It receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad();
        let mut value = t;
        value.zero_grad();
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
            op: "leaf",
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// A trainable leaf holding a copy of `t`.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let mut v = Tensor::from_vec(t.shape().to_vec(), t.data().to_vec()).expect("shape already valid");
        v.set_requires_grad(true);
        self.leaf(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    /// Gradient of the last `backward` target w.r.t. a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Resets accumulated leaf gradients.
    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub(crate) fn push(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[Var],
        backward: impl Backward<T> + 'static,
    ) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
            op,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Propagates `d loss / d leaf` into every leaf that requires a gradient.
    ///
    /// Repeated calls accumulate into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let is_leaf = node.inputs.is_empty();
            if !is_leaf {
                self.grads[i] = None;
            } else if node.requires_grad && self.grads[i].is_none() {
                self.grads[i] = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.grads[loss.0], &[T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(rule) = &node.backward else { continue };
            let Some(grad) = self.grads[i].take() else { continue };
            let cx = BackwardCx {
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
                grad: &grad,
                needs: node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect(),
            };
            let contributions = rule.backward(&cx);
            debug_assert_eq!(contributions.len(), node.inputs.len(), "op {}", node.op);
            for (input, contribution) in node.inputs.iter().zip(contributions) {
                if let Some(c) = contribution {
                    if self.nodes[input.0].requires_grad {
                        debug_assert_eq!(c.len(), self.nodes[input.0].value.numel(), "op {}", node.op);
                        accumulate(&mut self.grads[input.0], &c);
                    }
                }
            }
        }
        Ok(())
    }

    pub(crate) fn check_var(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::invalid(format!("variable {} does not belong to this graph", v.0)))
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}
