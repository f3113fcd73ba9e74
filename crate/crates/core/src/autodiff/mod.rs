//! Reverse-mode differentiation over a recorded tape.
//!
//! Every primitive applied to a [`Var`] evaluates eagerly and appends one node
//! to its [`Tape`]: the output value, the ids of its inputs and a
//! [`BackwardOp`] that maps the output cotangent to input cotangents. Node ids
//! are assigned in execution order, so the tape is topologically sorted by
//! construction and [`Tape::backward`] is a single reverse sweep.

mod conv;
mod elementwise;
mod reduce;
mod softmax;
mod structural;

use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use conv::{conv2d_output_extent, conv_transpose2d_output_extent, Conv2dSpec};
pub(crate) use softmax::softmax_values;

pub type NodeId = usize;

/// Values visible to a backward rule.
pub struct BackwardCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    /// `needs[i]` is false when input `i` is untracked; its gradient may be skipped.
    pub needs: Vec<bool>,
}

/// Vector-Jacobian product of one recorded primitive.
pub trait BackwardOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// One entry per input; `None` for inputs that need no gradient.
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    inputs: Vec<NodeId>,
    op: Option<Box<dyn BackwardOp<T>>>,
    tracked: bool,
}

/// Append-only record of a computation.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("check_finite", &self.check_finite)
            .finish()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            check_finite: false,
        }
    }

    /// Tape that rejects any primitive producing NaN or infinity.
    pub fn checked() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            check_finite: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Vec::new(), None, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Vec::new(), None, false)
    }

    fn push(
        &self,
        value: Tensor<T>,
        inputs: Vec<NodeId>,
        op: Option<Box<dyn BackwardOp<T>>>,
        tracked: bool,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            inputs,
            op,
            tracked,
        });
        Var { tape: self, id }
    }

    /// Appends the result of a primitive. Ops outside this module (fused
    /// layers) use this to join the tape.
    pub fn record<'t>(
        &'t self,
        output: Tensor<T>,
        inputs: &[Var<'t, T>],
        op: impl BackwardOp<T> + 'static,
    ) -> Result<Var<'t, T>> {
        if self.check_finite {
            if let Some(index) = output.first_non_finite() {
                return Err(Error::NonFinite {
                    op: op.name(),
                    index,
                });
            }
        }
        let ids: Vec<NodeId> = inputs.iter().map(|v| v.id).collect();
        let tracked = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].tracked)
        };
        let op: Option<Box<dyn BackwardOp<T>>> = if tracked { Some(Box::new(op)) } else { None };
        Ok(self.push(output, ids, op, tracked))
    }

    pub fn value(&self, id: NodeId) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn is_tracked(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// Propagates `d loss / d node` from a one-element `loss` back to every
    /// tracked leaf.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|&i| &nodes[i].value).collect(),
                output: &node.value,
                grad: &grad,
                needs: node.inputs.iter().map(|&i| nodes[i].tracked).collect(),
            };
            let input_grads = op.backward(&ctx)?;
            for ((&input, needed), g) in node.inputs.iter().zip(&ctx.needs).zip(input_grads) {
                let (true, Some(g)) = (*needed, g) else { continue };
                if g.shape() != nodes[input].value.shape() {
                    return Err(Error::shape(op.name(), nodes[input].value.shape(), g.shape()));
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        // Only leaves keep their gradient; intermediates were consumed above.
        let leaf_shapes = nodes
            .iter()
            .map(|n| (n.op.is_none() && n.tracked).then(|| n.value.shape().to_vec()))
            .collect();
        Ok(Gradients {
            grads,
            leaf_shapes,
        })
    }
}

/// Leaf gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    leaf_shapes: Vec<Option<Vec<usize>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a tracked leaf, or zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        match self.grads.get(var.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => match self.leaf_shapes.get(var.id).and_then(|s| s.as_ref()) {
                Some(shape) => Tensor::zeros(shape),
                None => Tensor::zeros(var.value().shape()),
            },
        }
    }

    /// Moves the gradient out; zeros when untouched.
    pub fn take(&mut self, var: Var<'_, T>) -> Tensor<T> {
        match self.grads.get_mut(var.id).and_then(|g| g.take()) {
            Some(g) => g,
            None => Tensor::zeros(var.value().shape()),
        }
    }
}

/// Handle to a node on a [`Tape`].
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: NodeId,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.is_tracked(self.id)
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> Result<T> {
        self.value().item()
    }

    pub(crate) fn record(
        self,
        output: Tensor<T>,
        inputs: &[Var<'t, T>],
        op: impl BackwardOp<T> + 'static,
    ) -> Result<Var<'t, T>> {
        self.tape.record(output, inputs, op)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0));
        let loss = x.sum_all().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x), Tensor::ones(&[2, 3]));
    }

    #[test]
    fn square_gives_twice_x() {
        let tape = Tape::<f64>::new();
        let data = Tensor::from_f64(&[4], &[1.0, -2.0, 0.5, 3.0]).unwrap();
        let x = tape.leaf(data.clone());
        let loss = x.mul(x).unwrap().sum_all().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x), data.map(|v| 2.0 * v));
    }

    #[test]
    fn untouched_leaf_gets_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[3]));
        let y = tape.leaf(Tensor::ones(&[2, 2]));
        let loss = x.sum_all().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(y), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_are_not_tracked() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::ones(&[2]));
        let y = c.mul_scalar(3.0).unwrap();
        assert!(!y.is_tracked());
        let x = tape.leaf(Tensor::ones(&[2]));
        assert!(x.add(c).unwrap().is_tracked());
    }

    #[test]
    fn checked_tape_reports_non_finite() {
        let tape = Tape::<f64>::checked();
        let x = tape.leaf(Tensor::full(&[2], 1000.0));
        assert!(matches!(x.exp(), Err(Error::NonFinite { .. })));
        let lax = Tape::<f64>::new();
        let x = lax.leaf(Tensor::full(&[2], 1000.0));
        assert!(x.exp().is_ok());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = sum(x*y + x), df/dx = y + 1
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let y = tape.leaf(Tensor::from_f64(&[2], &[3.0, -4.0]).unwrap());
        let f = x.mul(y).unwrap().add(x).unwrap().sum_all().unwrap();
        let g = tape.backward(f).unwrap();
        assert_eq!(g.wrt(x).data(), &[4.0, -3.0]);
        assert_eq!(g.wrt(y).data(), &[1.0, 2.0]);
    }
}
