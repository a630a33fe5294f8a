//! Dense row-major tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable value plus an optional record of the
//! operation that produced it. Calling [`Tensor::backward`] on a scalar
//! replays those records in reverse topological order and accumulates
//! gradients into every reachable tensor that requires them.
//!
//! Graph nodes are reference counted and single threaded by design; the
//! training loop owns one graph at a time and drops it after each step.

pub mod gradcheck;
mod ops;

pub use ops::concat;

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Receives d(loss)/d(output) and accumulates into the parents it captured.
type BackwardFn<S> = Box<dyn Fn(&[S])>;

struct Inner<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Rc<Vec<S>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<S>>>,
    parents: Vec<Tensor<S>>,
    backward_fn: Option<BackwardFn<S>>,
}

#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    inner: Rc<Inner<S>>,
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub(crate) fn check_shape_data(op: &'static str, data_len: usize, shape: &[usize]) -> Result<usize> {
    let numel: usize = shape.iter().product();
    if numel != data_len {
        return Err(Error::contract(
            op,
            format!("shape {:?} wants {} elements, got {}", shape, numel, data_len),
        ));
    }
    Ok(numel)
}

impl<S: Scalar> Tensor<S> {
    fn new_leaf(data: Vec<S>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: Rc::new(data),
                requires_grad,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward_fn: None,
            }),
        }
    }

    /// Non-differentiable leaf.
    pub fn constant(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        check_shape_data("Tensor::constant", data.len(), shape)?;
        Ok(Self::new_leaf(data, shape.to_vec(), false))
    }

    /// Differentiable leaf: gradients accumulate here during backward.
    pub fn variable(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        check_shape_data("Tensor::variable", data.len(), shape)?;
        Ok(Self::new_leaf(data, shape.to_vec(), true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new_leaf(vec![S::zero(); numel], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Self::new_leaf(vec![value; numel], shape.to_vec(), false)
    }

    pub fn scalar(value: S) -> Self {
        Self::new_leaf(vec![value], vec![1], false)
    }

    /// Internal constructor for op outputs. Records parents and the backward
    /// closure only when some parent participates in differentiation.
    pub(crate) fn from_op(
        data: Vec<S>,
        shape: Vec<usize>,
        parents: Vec<Tensor<S>>,
        backward: impl Fn(&[S]) + 'static,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Self::new_leaf(data, shape, false);
        }
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: Rc::new(data),
                requires_grad: true,
                grad: RefCell::new(None),
                parents,
                backward_fn: Some(Box::new(backward)),
            }),
        }
    }

    /// Same data, reinterpreted under a new shape, sharing the buffer.
    pub(crate) fn view_of(&self, shape: Vec<usize>, parents: Vec<Tensor<S>>, backward: impl Fn(&[S]) + 'static) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), self.numel());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Tensor {
                inner: Rc::new(Inner {
                    id: fresh_id(),
                    shape,
                    data: Rc::clone(&self.inner.data),
                    requires_grad: false,
                    grad: RefCell::new(None),
                    parents: Vec::new(),
                    backward_fn: None,
                }),
            };
        }
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: Rc::clone(&self.inner.data),
                requires_grad: true,
                grad: RefCell::new(None),
                parents,
                backward_fn: Some(Box::new(backward)),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn parents(&self) -> &[Tensor<S>] {
        &self.inner.parents
    }

    /// Copy of the accumulated gradient, if any backward pass reached this
    /// tensor.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.numel() != 1 {
            return Err(Error::contract(
                "Tensor::item",
                format!("expected one element, shape is {:?}", self.shape()),
            ));
        }
        Ok(self.inner.data[0])
    }

    /// Cut from the graph: same values, no history, no gradient.
    pub fn detach(&self) -> Tensor<S> {
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape: self.inner.shape.clone(),
                data: Rc::clone(&self.inner.data),
                requires_grad: false,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward_fn: None,
            }),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    /// Accumulates a gradient contribution elementwise.
    pub(crate) fn accumulate_grad(&self, contribution: &[S]) {
        debug_assert_eq!(contribution.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += *ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Reverse-mode differentiation from a scalar loss. Every tensor on the
    /// recorded path with `requires_grad` receives its gradient; leaves keep
    /// it until the next `zero_grad` or optimizer step.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(
                "Tensor::backward",
                format!("loss must be scalar, shape is {:?}", self.shape()),
            ));
        }
        if !self.requires_grad() {
            return Err(Error::contract(
                "Tensor::backward",
                "loss does not depend on any differentiable tensor",
            ));
        }
        let tape = Tape::record(self);
        tape.replay(self);
        Ok(())
    }
}

/// Topological record of the differentiable subgraph reaching a root.
/// Parents appear before consumers; the root is last. Each node enters the
/// tape exactly once, so replay runs every backward closure exactly once.
pub struct Tape<S: Scalar> {
    order: Vec<Tensor<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn record(root: &Tensor<S>) -> Self {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // Iterative post-order; the second stack entry flag marks "children
        // already expanded".
        let mut stack: Vec<(Tensor<S>, bool)> = vec![(root.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            for parent in node.parents() {
                if parent.requires_grad() && !visited.contains(&parent.id()) {
                    stack.push((parent.clone(), false));
                }
            }
        }
        Tape { order }
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Number of recorded op outputs (nodes carrying a backward closure).
    pub fn op_count(&self) -> usize {
        self.order
            .iter()
            .filter(|t| t.inner.backward_fn.is_some())
            .count()
    }

    fn replay(&self, root: &Tensor<S>) {
        // Op outputs start each replay from scratch; only leaves accumulate
        // across backward calls.
        for node in &self.order {
            if node.inner.backward_fn.is_some() {
                node.zero_grad();
            }
        }
        root.accumulate_grad(&[S::one()]);
        for node in self.order.iter().rev() {
            if let Some(backward) = &node.inner.backward_fn {
                // Ops always allocate a fresh output, so no parent aliases
                // this node and the borrow cannot conflict.
                let guard = node.inner.grad.borrow();
                if let Some(g) = guard.as_ref() {
                    backward(g);
                }
            }
        }
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Resolves an axis index, supporting negative values counted from the end.
pub(crate) fn normalize_axis(op: &'static str, axis: isize, rank: usize) -> Result<usize> {
    let r = rank as isize;
    let a = if axis < 0 { axis + r } else { axis };
    if a < 0 || a >= r {
        return Err(Error::contract(
            op,
            format!("axis {} out of range for rank {}", axis, rank),
        ));
    }
    Ok(a as usize)
}
