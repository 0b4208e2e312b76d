//! Tensor values and the backward graph.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use super::Real;
use crate::{Error, Result};

/// Backward closure: receives the node's output gradient and output data and
/// accumulates into the parents it captured at construction time.
type BackwardFn<S> = Box<dyn Fn(&[S], &[S])>;

struct Node<S: Real> {
    shape: Vec<usize>,
    data: Vec<S>,
    /// Present iff `requires_grad`; same length as `data`.
    grad: Option<Vec<S>>,
    requires_grad: bool,
    /// Kept only for topological ordering; backward closures hold their own
    /// handles to the parents they write to.
    parents: Vec<Tensor<S>>,
    backward: Option<BackwardFn<S>>,
}

/// A dense row-major tensor participating in a backward graph.
///
/// Cloning is cheap (shared node). Gradients accumulate additively: calling
/// [`Tensor::backward`] twice doubles leaf gradients unless
/// [`Tensor::zero_grad`] is called in between.
pub struct Tensor<S: Real> {
    node: Rc<RefCell<Node<S>>>,
}

impl<S: Real> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor { node: Rc::clone(&self.node) }
    }
}

impl<S: Real> Tensor<S> {
    fn new_node(shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        let grad = requires_grad.then(|| vec![S::zero(); data.len()]);
        Tensor {
            node: Rc::new(RefCell::new(Node {
                shape,
                data,
                grad,
                requires_grad,
                parents: Vec::new(),
                backward: None,
            })),
        }
    }

    /// A tensor that takes no gradient (inputs, targets, fixed kernels).
    pub fn constant(shape: &[usize], data: Vec<S>) -> Self {
        Self::new_node(shape.to_vec(), data, false)
    }

    /// A leaf that accumulates gradient (network parameters, probe inputs).
    pub fn param(shape: &[usize], data: Vec<S>) -> Self {
        Self::new_node(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::constant(shape, vec![S::zero(); shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Self::constant(shape, vec![v; shape.iter().product()])
    }

    /// Rank-0 constant scalar.
    pub fn scalar(v: S) -> Self {
        Self::constant(&[], vec![v])
    }

    /// Interior node produced by an operator. Gradient is required iff any
    /// parent requires it; otherwise the node is detached from the graph.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<S>,
        parents: Vec<Tensor<S>>,
        backward: BackwardFn<S>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let t = Self::new_node(shape, data, requires_grad);
        if requires_grad {
            let mut n = t.node.borrow_mut();
            n.parents = parents;
            n.backward = Some(backward);
        }
        t
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.node.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.borrow().requires_grad
    }

    /// Borrow the value buffer. The borrow must be released before any
    /// mutation (`set_data`, `backward`) on this tensor.
    pub fn data(&self) -> Ref<'_, [S]> {
        Ref::map(self.node.borrow(), |n| n.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.node.borrow().data.clone()
    }

    /// The single element of a rank-0 or one-element tensor.
    pub fn item(&self) -> S {
        let n = self.node.borrow();
        assert_eq!(n.data.len(), 1, "item() on tensor of shape {:?}", n.shape);
        n.data[0]
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.node.borrow().grad.clone()
    }

    /// Replace the value buffer in place (optimizer updates). Length-checked.
    pub fn set_data(&self, data: Vec<S>) {
        let mut n = self.node.borrow_mut();
        assert_eq!(data.len(), n.data.len(), "set_data length mismatch");
        n.data = data;
    }

    /// Apply an in-place update to the value buffer.
    pub fn update_data(&self, f: impl FnOnce(&mut [S])) {
        f(&mut self.node.borrow_mut().data);
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.node.borrow_mut().grad.as_mut() {
            g.iter_mut().for_each(|v| *v = S::zero());
        }
    }

    /// Accumulate into this tensor's gradient. No-op when the tensor does not
    /// require gradient, so backward closures may call it unconditionally.
    pub(crate) fn add_grad(&self, f: impl FnOnce(&mut [S])) {
        let mut n = self.node.borrow_mut();
        if !n.requires_grad {
            return;
        }
        f(n.grad.as_mut().expect("grad slot missing"));
    }

    fn ptr(&self) -> usize {
        Rc::as_ptr(&self.node) as usize
    }

    /// Reverse topological order: every node appears after all of its parents.
    fn topo_order(&self) -> Vec<Tensor<S>> {
        let mut order = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor<S>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.ptr()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.node.borrow().parents.iter() {
                stack.push((p.clone(), false));
            }
        }
        order
    }

    /// Run reverse-mode accumulation from this scalar.
    ///
    /// Seeds the output gradient with 1 and propagates to every reachable
    /// leaf. Gradients add onto whatever is already stored.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar output, got shape {:?}",
                self.shape()
            )));
        }
        let order = self.topo_order();
        // Interior gradients are scratch space for this pass; only leaves
        // accumulate across calls. Without the reset, a second backward would
        // compound through retained interior grads instead of doubling.
        for t in &order {
            if t.node.borrow().backward.is_some() {
                t.zero_grad();
            }
        }
        self.add_grad(|g| g[0] += S::one());
        for t in order.iter().rev() {
            let n = t.node.borrow();
            if let (Some(back), Some(grad)) = (n.backward.as_ref(), n.grad.as_ref()) {
                back(grad, &n.data);
            }
        }
        Ok(())
    }
}
