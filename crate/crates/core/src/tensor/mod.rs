//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted buffer. Every op that has at
//! least one gradient-tracking input records a [`TapeNode`] holding its inputs
//! and a backward rule; [`Tensor::backward`] walks those nodes in reverse
//! topological order and accumulates gradients into the tracked leaves.
//!
//! Only the broadcast forms the network needs are supported: scalar-vs-tensor
//! and same-shape elementwise, plus a plane-vs-volume multiply.

mod conv;
mod ops;
mod pool;
mod sample;
mod scalar;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

pub use scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

/// Recorded op: identifier, the inputs it consumed, and the rule mapping the
/// output gradient (and output values) to one optional gradient per input.
pub struct TapeNode<T: Scalar> {
    op: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

impl<T: Scalar> TapeNode<T> {
    pub fn op(&self) -> &'static str {
        self.op
    }

    pub fn inputs(&self) -> &[Tensor<T>] {
        &self.inputs
    }
}

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    node: Option<TapeNode<T>>,
}

impl<T: Scalar> Drop for Inner<T> {
    // Unwinds long op chains iteratively instead of through nested Arc drops.
    fn drop(&mut self) {
        let mut stack: Vec<Tensor<T>> = match self.node.take() {
            Some(node) => node.inputs,
            None => return,
        };
        while let Some(t) = stack.pop() {
            if let Ok(mut inner) = Arc::try_unwrap(t.inner) {
                if let Some(node) = inner.node.take() {
                    stack.extend(node.inputs);
                }
            }
        }
    }
}

/// Dense row-major n-dimensional array with optional gradient tracking.
pub struct Tensor<T: Scalar = f64> {
    inner: Arc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.inner.shape);
        if let Some(node) = &self.inner.node {
            d.field("op", &node.op);
        }
        if self.numel() <= 16 {
            d.field("data", &self.inner.data);
        }
        d.field("requires_grad", &self.inner.requires_grad).finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, node: Option<TapeNode<T>>) -> Self {
        assert_eq!(
            numel_of(&shape),
            data.len(),
            "shape {shape:?} does not match {} values",
            data.len()
        );
        Self {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                node,
            }),
        }
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(shape: &[usize], data: Vec<T>) -> Self {
        Self::build(shape.to_vec(), data, false, None)
    }

    /// Trainable leaf: gradients are accumulated into it by [`Tensor::backward`].
    pub fn param(shape: &[usize], data: Vec<T>) -> Self {
        Self::build(shape.to_vec(), data, true, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, vec![T::zero(); numel_of(shape)])
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::new(shape, vec![value; numel_of(shape)])
    }

    pub fn scalar(value: T) -> Self {
        Self::new(&[], vec![value])
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Self::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    /// Records the result of an op. A tape node is kept only when some input
    /// tracks gradients.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let tracked = inputs.iter().any(|t| t.requires_grad());
        let node = tracked.then(|| TapeNode {
            op,
            inputs,
            backward,
        });
        Self::build(shape, data, tracked, node)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    pub fn node(&self) -> Option<&TapeNode<T>> {
        self.inner.node.as_ref()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on a tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.iter().map(|x| x.as_f64()).collect()
    }

    /// Accumulated gradient of a tracked leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock") = None;
    }

    /// Same values, cut from the tape: no gradient flows back through the result.
    pub fn detach(&self) -> Tensor<T> {
        Self::build(self.inner.shape.clone(), self.inner.data.clone(), false, None)
    }

    /// Same values reinterpreted under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        assert_eq!(
            numel_of(shape),
            self.numel(),
            "cannot reshape {:?} into {shape:?}",
            self.shape()
        );
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.inner.data.clone(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        )
    }

    /// Reverse-mode sweep from a scalar. Gradients of tracked leaves accumulate
    /// across calls until [`Tensor::zero_grad`].
    pub fn backward(&self) {
        assert_eq!(
            self.numel(),
            1,
            "backward() needs a scalar, got shape {:?}",
            self.shape()
        );
        if !self.requires_grad() {
            return;
        }
        let order = self.topo_order();
        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match &t.inner.node {
                Some(node) => {
                    let input_grads = (node.backward)(&g, &t.inner.data);
                    debug_assert_eq!(input_grads.len(), node.inputs.len());
                    for (input, ig) in node.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.len(), input.numel(), "gradient size from {}", node.op);
                        match grads.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                            None => {
                                grads.insert(input.id(), ig);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = t.inner.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
    }

    /// Tracked nodes reachable from `self`, each listed after all of its inputs.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.id());
        while let Some((t, next)) = stack.pop() {
            let inputs = t.inner.node.as_ref().map(|n| n.inputs.as_slice()).unwrap_or(&[]);
            if let Some(child) = inputs[next..].iter().position(|c| c.requires_grad() && !seen.contains(&c.id())) {
                let idx = next + child;
                let c = inputs[idx].clone();
                stack.push((t, idx + 1));
                seen.insert(c.id());
                stack.push((c, 0));
            } else {
                order.push(t);
            }
        }
        order
    }
}
