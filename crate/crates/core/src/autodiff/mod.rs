//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s during one
//! forward pass. Nodes are appended in execution order, so the list is
//! topologically sorted and [`Tape::backward`] replays it in reverse.

mod finite_diff;
mod ops;

pub use finite_diff::{finite_diff_grad, max_relative_error, relative_error, DEFAULT_EPS};
pub use ops::{avgpool2d, conv2d, conv3d, deformable_conv2d, maxpool3d, softmax, stack};

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Vector-Jacobian product of one node: given the output gradient, the
/// input values and the output value, returns one gradient per input
/// (`None` for inputs that do not need one).
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T: Real> {
    op: &'static str,
    value: Rc<Tensor<T>>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Operation record for one forward pass. Not shared across threads.
pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Result<Var<'_, T>> {
        if !node.value.all_finite() {
            return Err(Error::NonFinite { op: node.op });
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(node);
        Ok(Var { tape: self, id })
    }

    /// Leaf whose gradient is wanted (a parameter or an input under test).
    pub fn param(&self, value: Tensor<T>) -> Result<Var<'_, T>> {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor<T>) -> Result<Var<'_, T>> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Result<Var<'_, T>> {
        self.push(Node { op: "leaf", value: Rc::new(value), inputs: vec![], requires_grad, backward: None })
    }

    /// Records a derived value. `backward` is dropped when no input needs
    /// a gradient.
    pub(crate) fn record(
        &self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[Var<'_, T>],
        backward: BackwardFn<T>,
    ) -> Result<Var<'_, T>> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| {
                debug_assert!(std::ptr::eq(v.tape, self), "mixing tapes");
                nodes[v.id].requires_grad
            })
        };
        self.push(Node {
            op,
            value: Rc::new(value),
            inputs: inputs.iter().map(|v| v.id).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        })
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Propagates `∂loss/∂·` to every node that requires a gradient.
    /// Gradients reaching a node from several consumers are summed.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Autodiff("loss was recorded on a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.dims() != [1] {
            return Err(Error::Autodiff(format!("loss must have shape [1], found {:?}", root.value.dims())));
        }
        if !root.requires_grad {
            return Err(Error::Autodiff("loss does not depend on any variable that requires a gradient".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::scalar(T::ONE));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad_out) = grads[id].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| nodes[i].value.as_ref()).collect();
            let input_grads = backward(&grad_out, &inputs, &node.value)?;
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}: wrong gradient count", node.op);
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !nodes[input].requires_grad {
                    continue;
                }
                if g.dims() != nodes[input].value.dims() {
                    return Err(Error::Autodiff(format!(
                        "{}: gradient shape {:?} does not match input shape {:?}",
                        node.op,
                        g.dims(),
                        nodes[input].value.dims()
                    )));
                }
                grads[input] = Some(match grads[input].take() {
                    Some(acc) => add_assign(acc, &g),
                    None => g,
                });
            }
        }
        // Intermediate gradients were taken above; only leaves remain.
        for g in grads.iter().flatten() {
            if !g.all_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { grads })
    }
}

fn add_assign<T: Real>(mut acc: Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
    acc
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.dims().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }
}

/// Result of [`Tape::backward`]: gradients of the leaves, by node.
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `var`, if `var` is a leaf that
    /// requires a gradient and the loss depends on it.
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Like [`wrt`](Self::wrt), but a leaf the loss does not reach gets a
    /// zero gradient.
    pub fn wrt_or_zero(&self, var: Var<'_, T>) -> Result<Tensor<T>> {
        match self.wrt(var) {
            Some(g) => Ok(g.clone()),
            None => Tensor::zeros(&var.dims()),
        }
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.param(t(&[1., 2., 3.])).unwrap();
        let loss = x.sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1., 1., 1.]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let tape = Tape::new();
        let x = tape.param(t(&[2., -3.])).unwrap();
        let loss = x.mul(x).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[4., -6.]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let tape = Tape::new();
        let x = tape.param(t(&[0.])).unwrap();
        let loss = x.sigmoid().unwrap().mean().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn non_scalar_and_detached_losses_are_rejected() {
        let tape = Tape::new();
        let x = tape.param(t(&[1., 2.])).unwrap();
        assert!(matches!(tape.backward(x.relu().unwrap()), Err(Error::Autodiff(_))));
        let c = tape.constant(t(&[1., 2.])).unwrap();
        assert!(matches!(tape.backward(c.sum().unwrap()), Err(Error::Autodiff(_))));
        let other = Tape::new();
        let y = other.param(t(&[1.])).unwrap();
        assert!(tape.backward(y.sum().unwrap()).is_err());
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        // loss = sum(a⊙x) + sum(b⊙x) must equal the sum of the two
        // single-consumer gradients.
        let xv = t(&[0.5, -1.5, 2.0]);
        let a = t(&[1.0, 2.0, -3.0]);
        let b = t(&[-0.5, 0.25, 4.0]);
        let single = |w: &Tensor<f64>| {
            let tape = Tape::new();
            let x = tape.param(xv.clone()).unwrap();
            let w = tape.constant(w.clone()).unwrap();
            let loss = x.mul(w).unwrap().tanh().unwrap().sum().unwrap();
            tape.backward(loss).unwrap().wrt(x).unwrap().clone()
        };
        let tape = Tape::new();
        let x = tape.param(xv.clone()).unwrap();
        let wa = tape.constant(a.clone()).unwrap();
        let wb = tape.constant(b.clone()).unwrap();
        let la = x.mul(wa).unwrap().tanh().unwrap().sum().unwrap();
        let lb = x.mul(wb).unwrap().tanh().unwrap().sum().unwrap();
        let g = tape.backward(la.add(lb).unwrap()).unwrap();
        let want = single(&a).add(&single(&b)).unwrap();
        assert!(g.wrt(x).unwrap().max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn non_finite_values_are_caught_at_the_source() {
        let tape = Tape::new();
        let x = tape.param(t(&[f64::MAX])).unwrap();
        assert!(matches!(x.add(x), Err(Error::NonFinite { .. })));
        assert!(tape.param(t(&[f64::NAN])).is_err());
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[1.])).unwrap();
        let y = tape.param(t(&[1.])).unwrap();
        let g = tape.backward(x.sum().unwrap()).unwrap();
        assert!(g.wrt(y).is_none());
        assert_eq!(g.wrt_or_zero(y).unwrap().data(), &[0.0]);
    }
}
