//! Reverse-mode automatic differentiation.
//!
//! Every differentiable operation executed through a [`Tape`] appends one
//! node holding a backward closure. Values live behind `Rc`, so operations
//! whose inputs are all untracked record nothing and their intermediates are
//! freed as soon as the last [`Var`] handle drops. A tape serves exactly one
//! forward pass; build a fresh one per training step.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

/// Computes input gradients from the output gradient. The flag slice marks
/// which inputs need one; entries for the others may be `None`.
pub(crate) type BackwardFn<E> = Box<dyn Fn(&[E], &[bool]) -> Vec<Option<Vec<E>>>>;

struct Node<E> {
    /// Tape index of each input, `None` for untracked inputs.
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn<E>>,
    numel: usize,
}

/// Handle to a value computed on a tape.
#[derive(Clone)]
pub struct Var<E: Element = f32> {
    value: Rc<Tensor<E>>,
    node: Option<usize>,
}

impl<E: Element> Var<E> {
    pub fn value(&self) -> &Tensor<E> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[E] {
        self.value.data()
    }

    /// Whether gradients flow through this value.
    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn rc(&self) -> Rc<Tensor<E>> {
        Rc::clone(&self.value)
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> E {
        self.value.data()[0]
    }
}

#[derive(Default)]
pub struct Tape<E: Element = f32> {
    nodes: RefCell<Vec<Node<E>>>,
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a tensor. It is tracked iff `tensor.requires_grad`.
    pub fn leaf(&self, tensor: Tensor<E>) -> Var<E> {
        let node = if tensor.requires_grad {
            Some(self.push(Node {
                inputs: Vec::new(),
                backward: None,
                numel: tensor.numel(),
            }))
        } else {
            None
        };
        Var {
            value: Rc::new(tensor),
            node,
        }
    }

    /// Registers a trainable parameter (tracked leaf).
    pub fn param(&self, tensor: &Tensor<E>) -> Var<E> {
        let mut t = tensor.clone();
        t.grad = None;
        self.leaf(t.with_requires_grad(true))
    }

    /// Registers a value that never receives a gradient.
    pub fn constant(&self, tensor: Tensor<E>) -> Var<E> {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn push(&self, node: Node<E>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Wraps an op result, recording `backward` when any input is tracked.
    pub(crate) fn record(
        &self,
        value: Tensor<E>,
        inputs: &[&Var<E>],
        backward: impl Fn(&[E], &[bool]) -> Vec<Option<Vec<E>>> + 'static,
    ) -> Var<E> {
        let ids: Vec<Option<usize>> = inputs.iter().map(|v| v.node).collect();
        let node = if ids.iter().any(Option::is_some) {
            Some(self.push(Node {
                inputs: ids,
                backward: Some(Box::new(backward)),
                numel: value.numel(),
            }))
        } else {
            None
        };
        Var {
            value: Rc::new(value),
            node,
        }
    }

    /// Backpropagates from a one-element `loss`.
    ///
    /// Nodes are visited in exact reverse execution order; gradients from
    /// multiple consumers of a value add up.
    pub fn backward(&self, loss: &Var<E>) -> Result<Gradients<E>> {
        if loss.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let root = loss
            .node
            .ok_or_else(|| Error::Contract("loss does not depend on any tracked value".into()))?;
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<E>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![E::one()]);
        for id in (0..=root).rev() {
            let Some(node) = nodes.get(id) else { continue };
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(out_grad) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = backward(&out_grad, &needs);
            for (slot, g) in node.inputs.iter().zip(input_grads) {
                let (Some(parent), Some(g)) = (slot, g) else { continue };
                debug_assert_eq!(g.len(), nodes[*parent].numel);
                match &mut grads[*parent] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    empty @ None => *empty = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of tracked leaves after a backward pass.
pub struct Gradients<E> {
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of `var`. Tracked leaves unreachable from the loss get zeros;
    /// untracked values get `None`.
    pub fn get(&self, var: &Var<E>) -> Option<Tensor<E>> {
        let id = var.node?;
        let data = match self.grads.get(id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => vec![E::zero(); var.value.numel()],
        };
        Some(Tensor::from_parts(var.shape().to_vec(), data))
    }

    /// Moves the gradient of `var` into `target.grad`.
    pub fn write_into(&mut self, var: &Var<E>, target: &mut Tensor<E>) {
        let data = var
            .node
            .and_then(|id| self.grads.get_mut(id).and_then(Option::take))
            .unwrap_or_else(|| vec![E::zero(); var.value.numel()]);
        target.grad = Some(data);
    }
}
