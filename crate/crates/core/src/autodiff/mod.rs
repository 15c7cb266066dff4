//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value, the ids of its
//! inputs and a backward rule. Nodes are created in topological order, so
//! [`Tape::backward`] simply walks them in reverse creation order.
//!
//! ```
//! use dc2fusion_core::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().item(), 6.0);
//! ```

mod ops;

use alloc::boxed::Box;

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub use ops::Broadcast;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Arguments handed to a backward rule.
pub struct BackwardCtx<'a, T> {
    /// Gradient of the loss with respect to this node's output.
    pub grad_out: &'a Tensor<T>,
    /// Forward values of the node's inputs, in registration order.
    pub inputs: &'a [&'a Tensor<T>],
    /// Forward value of the node itself.
    pub output: &'a Tensor<T>,
    /// Which inputs need a gradient; rules may return `None` for the rest.
    pub needs: &'a [bool],
}

pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    name: &'static str,
    value: Tensor<T>,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// New empty tape. Outputs are checked for NaN/Inf when debug assertions are on.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node, saved activation and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is retained after [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            name: "leaf",
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
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
        self.nodes[v.0].name
    }

    pub fn inputs_of(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    /// Gradient accumulated by the last backward pass, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Records an operation with a caller-supplied backward rule.
    ///
    /// The rule must return one entry per input (entries for inputs that do
    /// not need a gradient may be `None`).
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Result<Var> {
        self.push(name, inputs, value, Box::new(backward))
    }

    pub(crate) fn push(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            name,
            value,
            inputs: inputs.to_vec(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Populates gradients of `loss` with respect to every ancestor that
    /// requires one. Gradients of interior nodes are released as soon as they
    /// have been propagated; leaf gradients are kept for [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(rule) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad_out) = self.grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let ctx = BackwardCtx {
                grad_out: &grad_out,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            };
            let in_grads = rule(&ctx);
            debug_assert_eq!(in_grads.len(), node.inputs.len(), "rule {}", node.name);
            for (k, g) in in_grads.into_iter().enumerate() {
                let Some(g) = g else { continue };
                if !needs[k] {
                    continue;
                }
                let target = node.inputs[k].0;
                let slot = self.grads[target].get_or_insert_with(|| Tensor::zeros(self.nodes[target].value.shape()));
                if slot.shape() != g.shape() {
                    return Err(Error::ShapeMismatch {
                        op: node.name,
                        detail: alloc::format!(
                            "backward produced {:?} for input of shape {:?}",
                            g.shape(),
                            slot.shape()
                        ),
                    });
                }
                slot.add_assign(&g);
            }
            if !node.inputs.is_empty() {
                // interior node: gradient no longer needed
                self.grads[i] = None;
            }
        }
        Ok(())
    }

    /// Gradient for a leaf, or zeros if the loss did not depend on it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }
}

pub(crate) fn some_if<T>(need: bool, f: impl FnOnce() -> Tensor<T>) -> Option<Tensor<T>> {
    if need {
        Some(f())
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(&[3], vec![1.0, -2.0, 5.0]).unwrap());
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(1.5));
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 2.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert_eq!(tape.backward(x), Err(Error::NonScalarLoss(alloc::vec![2])));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::scalar(2.0));
        let b = tape.param(Tensor::scalar(5.0));
        let y = tape.mul(a, b).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.grad(a).is_none());
        assert_eq!(tape.grad(b).unwrap().item(), 2.0);
        assert_eq!(tape.grad_or_zeros(a).item(), 0.0);
    }

    #[test]
    fn backward_twice_is_bit_identical() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(&[4], vec![0.1, 0.7, -0.3, 2.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        let z = tape.mul(y, x).unwrap();
        let s = tape.sum(z).unwrap();
        tape.backward(s).unwrap();
        let g1 = tape.grad(x).unwrap().clone();
        tape.backward(s).unwrap();
        assert_eq!(&g1, tape.grad(x).unwrap());
    }

    #[test]
    fn non_finite_output_is_an_error_when_checked() {
        let mut tape = Tape::<f64>::new().with_finite_checks(true);
        let x = tape.param(Tensor::scalar(0.0));
        let one = tape.constant(Tensor::scalar(1.0));
        assert_eq!(tape.div(one, x), Err(Error::NonFinite("div")));
    }
}
