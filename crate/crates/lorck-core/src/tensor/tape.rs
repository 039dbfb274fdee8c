//! Wengert tape: operations are recorded in execution order and replayed in
//! reverse. Creation order is a topological order by construction, so the
//! backward sweep visits every node exactly once, after all its consumers.

use std::cell::RefCell;

use crate::error::{Error, Result};

use super::{Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<E: Element> {
    pub value: Tensor<E>,
    pub requires_grad: bool,
    pub op: Option<Box<dyn TapeOp<E>>>,
    /// Persistent gradient accumulator; populated for leaves by `backward`.
    pub grad: Option<Vec<E>>,
}

/// A recorded differentiable operation.
pub(crate) trait TapeOp<E: Element> {
    /// Push `upstream` (d loss / d output of node `out`) into the transient
    /// slots of this op's inputs. Implementations must *accumulate*.
    fn backward(&self, out: usize, upstream: &[E], nodes: &[Node<E>], slots: &mut [Option<Vec<E>>]);
}

/// Accumulate a contribution into a transient gradient slot.
pub(crate) fn accumulate<E: Element>(slots: &mut [Option<Vec<E>>], target: usize, contribution: Vec<E>) {
    match &mut slots[target] {
        Some(existing) => {
            debug_assert_eq!(existing.len(), contribution.len());
            for (a, b) in existing.iter_mut().zip(contribution) {
                *a += b;
            }
        }
        None => slots[target] = Some(contribution),
    }
}

pub(crate) struct TapeInner<E: Element> {
    pub nodes: Vec<Node<E>>,
}

/// Records differentiable operations; owner of all intermediate values.
///
/// A tape is confined to one thread. Typical use: bind parameter tensors as
/// leaves, build the forward computation, call [`Tape::backward`] on a scalar
/// loss, read leaf gradients, then drop the tape and start the next step
/// fresh.
pub struct Tape<E: Element> {
    pub(crate) inner: RefCell<TapeInner<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { inner: RefCell::new(TapeInner { nodes: Vec::new() }) }
    }

    /// Record an input value. Gradients accumulate on leaves with
    /// `requires_grad` after each `backward` call.
    pub fn leaf(&self, value: Tensor<E>, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, requires_grad, op: None, grad: None });
        Var(inner.nodes.len() - 1)
    }

    /// A leaf that never receives gradient (data, masks, constants).
    pub fn constant(&self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    pub(crate) fn push(&self, value: Tensor<E>, requires_grad: bool, op: Box<dyn TapeOp<E>>) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, requires_grad, op: Some(op), grad: None });
        Var(inner.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Tensor<E> {
        self.inner.borrow().nodes[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().nodes[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.inner.borrow().nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf (or any node that received one).
    pub fn grad(&self, v: Var) -> Option<Tensor<E>> {
        let inner = self.inner.borrow();
        let node = &inner.nodes[v.0];
        node.grad.as_ref().map(|g| {
            Tensor::from_vec(node.value.shape().to_vec(), g.clone()).expect("grad shape matches value")
        })
    }

    pub fn zero_grad(&self, v: Var) {
        self.inner.borrow_mut().nodes[v.0].grad = None;
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Reverse sweep from a scalar loss. Gradients *accumulate* (+=) on every
    /// `requires_grad` leaf; repeated calls without zeroing add up.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.nodes.is_empty() {
            return Err(Error::invalid("backward", "tape is empty"));
        }
        if loss.0 >= inner.nodes.len() {
            return Err(Error::invalid("backward", "loss var is not on this tape"));
        }
        if inner.nodes[loss.0].value.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", inner.nodes[loss.0].value.shape()),
            ));
        }

        let mut slots: Vec<Option<Vec<E>>> = vec![None; inner.nodes.len()];
        slots[loss.0] = Some(vec![E::ONE]);

        let mut leaf_contrib: Vec<(usize, Vec<E>)> = Vec::new();
        {
            let nodes = &inner.nodes;
            for i in (0..=loss.0).rev() {
                let Some(g) = slots[i].take() else { continue };
                if !nodes[i].requires_grad {
                    continue;
                }
                match &nodes[i].op {
                    Some(op) => op.backward(i, &g, nodes, &mut slots),
                    None => leaf_contrib.push((i, g)),
                }
            }
        }

        for (i, g) in leaf_contrib {
            let node = &mut inner.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_on_empty_tape_rejected() {
        let tape: Tape<f64> = Tape::new();
        assert!(tape.backward(Var(0)).is_err());
    }
}
