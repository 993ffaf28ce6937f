//! Reverse-mode differentiation tape.
//!
//! A [`Tape`] records every primitive executed on tracked [`Var`]s in
//! execution order, so a node's parents always precede it. [`Tape::backward`]
//! sweeps the record in reverse. Values not attached to a tape (inference)
//! never allocate nodes.

use std::cell::{Cell, RefCell};

use crate::error::{Result, TensorError};
use crate::tensor::{Real, Tensor};

pub type NodeId = usize;

/// Backward rule: receives the output gradient and, per input, whether a
/// gradient is needed. Returns one optional gradient per input.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    op: &'static str,
    shape: Vec<usize>,
    parents: Vec<Option<NodeId>>,
    backward: Option<BackwardFn<T>>,
}

/// Single-writer record of one training step.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Tensor<T>>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    /// Registers a differentiable leaf (a parameter or an input to be probed).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let id = self.push(Node {
            op: "leaf",
            shape: value.shape().to_vec(),
            parents: Vec::new(),
            backward: None,
        });
        Var {
            value,
            node: Some((self, id)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Name of the primitive that produced node `id`.
    pub fn op_name(&self, id: NodeId) -> Option<&'static str> {
        self.nodes.borrow().get(id).map(|n| n.op)
    }

    fn push(&self, node: Node<T>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        self.grads.borrow_mut().push(None);
        nodes.len() - 1
    }

    /// Propagates d(loss)/d(node) to every node the loss depends on.
    ///
    /// Gradients accumulate across calls: running `backward` twice without
    /// [`Tape::zero_grad`] doubles every stored gradient.
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<()> {
        let id = match loss.node {
            Some((tape, id)) if std::ptr::eq(tape, self) => id,
            _ => return Err(TensorError::Detached),
        };
        if loss.value.numel() != 1 {
            return Err(TensorError::NotScalar(loss.value.shape().to_vec()));
        }
        let nodes = self.nodes.borrow();
        let mut local: Vec<Option<Tensor<T>>> = vec![None; id + 1];
        local[id] = Some(Tensor::ones(loss.value.shape()));
        let mut grads = self.grads.borrow_mut();
        for nid in (0..=id).rev() {
            let Some(g) = local[nid].take() else { continue };
            let node = &nodes[nid];
            if let Some(bw) = &node.backward {
                let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
                let pgrads = bw(&g, &needs);
                for (parent, pg) in node.parents.iter().zip(pgrads) {
                    if let (Some(pid), Some(pg)) = (parent, pg) {
                        debug_assert_eq!(pg.shape(), nodes[*pid].shape.as_slice(), "grad of {}", nodes[*pid].op);
                        match &mut local[*pid] {
                            Some(acc) => acc.add_assign(&pg)?,
                            slot => *slot = Some(pg),
                        }
                    }
                }
            }
            match &mut grads[nid] {
                Some(acc) => acc.add_assign(&g)?,
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a tracked value, if it received one.
    pub fn grad(&self, var: &Var<'_, T>) -> Option<Tensor<T>> {
        let (tape, id) = var.node?;
        if !std::ptr::eq(tape, self) {
            return None;
        }
        self.grads.borrow()[id].clone()
    }

    pub fn grad_of(&self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.borrow().get(id).cloned().flatten()
    }

    pub fn zero_grad(&self) {
        for g in self.grads.borrow_mut().iter_mut() {
            *g = None;
        }
    }
}

/// A tensor value, optionally attached to a tape node.
#[derive(Clone)]
pub struct Var<'t, T: Real> {
    value: Tensor<T>,
    node: Option<(&'t Tape<T>, NodeId)>,
}

impl<'t, T: Real> std::fmt::Debug for Var<'t, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("value", &self.value)
            .field("node", &self.node.map(|(_, id)| id))
            .finish()
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// An untracked value; gradients never flow into it.
    pub fn constant(value: Tensor<T>) -> Self {
        Var { value, node: None }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn into_value(self) -> Tensor<T> {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node.map(|(_, id)| id)
    }

    pub fn tape(&self) -> Option<&'t Tape<T>> {
        self.node.map(|(t, _)| t)
    }

    /// Detached copy of this value.
    pub fn detach(&self) -> Self {
        Var::constant(self.value.clone())
    }

    /// Records the result of a primitive.
    ///
    /// When no input is tracked the backward rule is dropped and the result
    /// is an untracked value. When finite-checking is enabled on this thread,
    /// the output is scanned first.
    pub fn record(
        op: &'static str,
        inputs: &[&Var<'t, T>],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Result<Self> {
        if finite_check_enabled() && !value.is_finite() {
            return Err(TensorError::NonFinite(op));
        }
        let tape = inputs.iter().find_map(|v| v.tape());
        let Some(tape) = tape else {
            return Ok(Var::constant(value));
        };
        let parents = inputs
            .iter()
            .map(|v| match v.node {
                Some((t, id)) if std::ptr::eq(t, tape) => Some(id),
                _ => None,
            })
            .collect();
        let id = tape.push(Node {
            op,
            shape: value.shape().to_vec(),
            parents,
            backward: Some(Box::new(backward)),
        });
        Ok(Var {
            value,
            node: Some((tape, id)),
        })
    }
}

thread_local! {
    static FINITE_CHECK: Cell<bool> = const { Cell::new(false) };
}

/// Whether per-op NaN/Inf scanning is active on the current thread.
pub fn finite_check_enabled() -> bool {
    FINITE_CHECK.with(Cell::get)
}

/// Enables per-op NaN/Inf scanning on this thread until the guard drops.
pub fn finite_check() -> FiniteCheckGuard {
    let prev = FINITE_CHECK.with(|c| c.replace(true));
    FiniteCheckGuard { prev }
}

pub struct FiniteCheckGuard {
    prev: bool,
}

impl Drop for FiniteCheckGuard {
    fn drop(&mut self) {
        FINITE_CHECK.with(|c| c.set(self.prev));
    }
}
