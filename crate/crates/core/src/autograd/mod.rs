//! Tape-free reverse-mode automatic differentiation.
//!
//! Every [`Var`] owns its value plus a closure that maps the output gradient
//! to gradients for its parents. Graphs are built eagerly by calling ops on
//! `Var`s and are released when the last handle is dropped. Nodes whose
//! inputs do not require gradients never store a backward closure.

mod ops;
mod spatial;

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::Tensor;

pub use ops::{sigmoid, softmax_rows, softplus};
pub use spatial::CropBox;

type BackwardFn = Box<dyn Fn(&Tensor, &[Var], &Tensor) -> Vec<Option<Tensor>>>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

struct Node {
    id: u64,
    value: Tensor,
    grad: RefCell<Option<Tensor>>,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    /// A leaf that accumulates a gradient during [`Var::backward`].
    pub fn param(value: Tensor) -> Self {
        Self::leaf(value, true)
    }

    pub fn constant(value: Tensor) -> Self {
        Self::leaf(value, false)
    }

    pub fn leaf(value: Tensor, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        }))
    }

    pub(crate) fn from_op(value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Self {
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        let (parents, backward) = if requires_grad {
            (parents, Some(backward))
        } else {
            (Vec::new(), None)
        };
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            grad: RefCell::new(None),
            parents,
            backward,
            requires_grad,
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// A constant copy of this value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    /// Accumulated gradient of a leaf after one or more `backward` calls.
    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Back-propagate from a single-element output, accumulating into the
    /// gradients of every reachable leaf that requires them.
    pub fn backward(&self) {
        assert_eq!(self.0.value.len(), 1, "backward() needs a scalar output");
        self.backward_with(Tensor::full(self.shape(), 1.0));
    }

    pub fn backward_with(&self, seed: Tensor) {
        if !self.0.requires_grad {
            return;
        }
        let order = self.topo_order();
        accumulate(&self.0.grad, seed);
        for var in order.iter().rev() {
            let node = &var.0;
            let Some(backward) = &node.backward else { continue };
            let Some(grad) = node.grad.borrow_mut().take() else { continue };
            let parent_grads = backward(&grad, &node.parents, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, g) in node.parents.iter().zip(parent_grads) {
                if let Some(g) = g {
                    if parent.0.requires_grad {
                        debug_assert_eq!(g.shape(), parent.shape());
                        accumulate(&parent.0.grad, g);
                    }
                }
            }
        }
    }

    fn topo_order(&self) -> Vec<Var> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Var, bool)> = vec![(self.clone(), false)];
        while let Some((var, expanded)) = stack.pop() {
            if expanded {
                order.push(var);
                continue;
            }
            if !seen.insert(var.0.id) {
                continue;
            }
            stack.push((var.clone(), true));
            for p in &var.0.parents {
                if p.0.requires_grad && !seen.contains(&p.0.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

fn accumulate(slot: &RefCell<Option<Tensor>>, g: Tensor) {
    let mut slot = slot.borrow_mut();
    match slot.as_mut() {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests;
