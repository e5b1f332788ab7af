use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use super::counter::MacCounter;
use super::ops::{backward_op, Op};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) struct Node<T: Scalar> {
    pub value: Arc<Tensor<T>>,
    pub op: Op<T>,
    pub requires_grad: bool,
    pub grad: Option<Tensor<T>>,
}

/// Records operations on [`Var`]s for reverse-mode differentiation.
///
/// A tape is single-threaded and meant to live for one forward/backward
/// pass. Parameters are bound by name with [`Tape::param`] so that their
/// gradients can be collected afterwards with [`Tape::param_grads`].
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<BTreeMap<String, usize>>,
    counter: MacCounter,
    backward_done: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(BTreeMap::new()),
            counter: MacCounter::new(),
            backward_done: Cell::new(false),
        }
    }

    pub fn counter(&self) -> &MacCounter {
        &self.counter
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that takes no part in gradient computation.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Arc::new(value), Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Arc::new(value), Op::Leaf, true)
    }

    /// Binds a named parameter, reusing the existing node on repeat calls.
    pub fn param(&self, name: &str, value: &Arc<Tensor<T>>) -> Var<'_, T> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Var { tape: self, id };
        }
        let var = self.push(Arc::clone(value), Op::Leaf, true);
        self.params.borrow_mut().insert(name.to_string(), var.id);
        var
    }

    pub(crate) fn push(&self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Populates gradients of every differentiable leaf reachable from `loss`.
    ///
    /// Fails on a non-scalar loss, or when called twice without
    /// [`Tape::reset_grads`] in between.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Backward("loss belongs to another tape".into()));
        }
        if self.backward_done.get() {
            return Err(Error::Backward(
                "backward already ran on this tape; reset gradients first".into(),
            ));
        }
        let mut nodes = self.nodes.borrow_mut();
        let loss_shape = nodes[loss.id].value.shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {loss_shape:?}"
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = nodes[id].op {
                let shape = nodes[id].value.shape().to_vec();
                nodes[id].grad = Some(Tensor::new(shape, g)?);
                continue;
            }
            let node = &nodes[id];
            backward_op(&node.op, &node.value, &g, &nodes, &mut grads);
        }
        self.backward_done.set(true);
        Ok(())
    }

    pub fn reset_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
        self.backward_done.set(false);
    }

    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.nodes.borrow()[var.id].grad.clone()
    }

    /// Gradients of all bound parameters that received one.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor<T>> {
        let nodes = self.nodes.borrow();
        self.params
            .borrow()
            .iter()
            .filter_map(|(name, &id)| nodes[id].grad.clone().map(|g| (name.clone(), g)))
            .collect()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }
}
