//! Reverse-mode autodiff tape.
//!
//! Nodes are appended in execution order, which is therefore a topological
//! order; `backward` walks them strictly in reverse exactly once and sums the
//! contributions every consumer pushes toward its inputs. The tape is
//! single-writer: one `&mut Tape` threads through a forward pass, and ops are
//! pure functions of their input node values.

use super::{Element, Tensor};
use crate::{Error, Result};

/// Handle to a tape node. Cheap to copy; only valid for the tape it came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub(crate) id: usize,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }
}

pub(crate) struct Node<E: Element> {
    pub value: Tensor<E>,
    pub op: Option<Box<dyn Op<E>>>,
}

/// A differentiable tape operation: given the forward values, the incoming
/// output gradient, and a gradient sink, push contributions to the inputs'
/// slots. Implementations may recompute intermediates from input values.
pub(crate) trait Op<E: Element> {
    fn backward(&self, vals: &Vals<'_, E>, gy: &Tensor<E>, sink: &mut Sink<'_, E>);
}

/// Read-only view of forward node values during backward.
pub(crate) struct Vals<'a, E: Element> {
    nodes: &'a [Node<E>],
}

impl<'a, E: Element> Vals<'a, E> {
    pub fn get(&self, id: usize) -> &'a Tensor<E> {
        &self.nodes[id].value
    }
}

/// Gradient accumulator indexed by node id. Slots materialize lazily as zeros.
pub(crate) struct Sink<'a, E: Element> {
    grads: &'a mut [Option<Tensor<E>>],
}

impl<'a, E: Element> Sink<'a, E> {
    /// Mutable gradient slot for node `id`, zero-initialized on first touch.
    /// Callers accumulate (`+=`) into it so multiple consumers sum.
    pub fn slot(&mut self, id: usize, shape: &[usize]) -> &mut Tensor<E> {
        if self.grads[id].is_none() {
            self.grads[id] = Some(Tensor::zeros(shape));
        }
        self.grads[id].as_mut().unwrap()
    }
}

/// Gradients of a scalar loss with respect to leaf nodes.
pub struct Grads<E: Element> {
    g: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Grads<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.g.get(v.id).and_then(|o| o.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<E>> {
        self.g.get_mut(v.id).and_then(|o| o.take())
    }
}

pub struct Tape<E: Element> {
    pub(crate) nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Appends a leaf (no producing op; gradients accumulate here and stay).
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        self.push(value, None)
    }

    pub fn val(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.id].value
    }

    pub(crate) fn push(&mut self, value: Tensor<E>, op: Option<Box<dyn Op<E>>>) -> Var {
        value.debug_check_finite("tape op");
        let id = self.nodes.len();
        self.nodes.push(Node { value, op });
        Var { id }
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every leaf
    /// that `loss` depends on; interior gradients are freed as the sweep
    /// passes them. Deterministic given identical op order.
    pub fn backward(&self, loss: Var) -> Result<Grads<E>> {
        let lv = self.val(loss);
        if lv.numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = loss.id + 1;
        let mut grads: Vec<Option<Tensor<E>>> = Vec::new();
        grads.resize_with(n, || None);
        grads[loss.id] = Some(Tensor::full(lv.shape(), E::ONE));

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                None => grads[i] = Some(g),
                Some(op) => {
                    let vals = Vals { nodes: &self.nodes };
                    let mut sink = Sink { grads: &mut grads };
                    op.backward(&vals, &g, &mut sink);
                }
            }
        }
        Ok(Grads { g: grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_nonscalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = tape.sum_all(x);
        let grads = tape.backward(s).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.data(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_sum_of_square_is_2x() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[4], |i| 0.5 * i as f64 - 1.0));
        let xx = tape.mul(x, x).unwrap();
        let s = tape.sum_all(xx);
        let grads = tape.backward(s).unwrap();
        let gx = grads.get(x).unwrap();
        for (i, &g) in gx.data().iter().enumerate() {
            let want = 2.0 * (0.5 * i as f64 - 1.0);
            assert!((g - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fanout_gradients_sum_over_consumers() {
        // y = x + x ⇒ dy/dx = 2 via two consumer contributions.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[3], |i| i as f64));
        let y = tape.add(x, x).unwrap();
        let s = tape.sum_all(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }
}
