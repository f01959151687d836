//! Minimal reverse-mode autodiff tensor engine.
//!
//! Tensors are immutable row-major buffers. Operations build a graph of
//! reference-counted nodes; [`Tensor::backward`] walks the graph in reverse
//! topological order and accumulates gradients into the leaf tensors that
//! requested them. Gradient accumulation is additive: two backward passes
//! without [`Tensor::zero_grad`] produce exactly twice the gradient.

mod conv;
pub mod gradcheck;
pub mod ops;
mod scalar;

pub use conv::set_workers;
pub use gradcheck::{grad_check, grad_check_seeded, GradCheckReport};
pub use scalar::Scalar;

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: std::cell::Cell<bool> = const { std::cell::Cell::new(true) };
}

/// Run `f` without recording the autodiff graph (eval-mode forward passes).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>>>;

struct OpNode<T: Scalar> {
    parents: Vec<Tensor<T>>,
    /// Maps d(loss)/d(output) to d(loss)/d(parent_i) for each parent.
    backward: BackwardFn<T>,
}

struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    op: Option<OpNode<T>>,
}

/// An n-dimensional array participating in reverse-mode differentiation.
pub struct Tensor<T: Scalar> {
    node: Rc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    fn new_node(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        op: Option<OpNode<T>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        }
    }

    /// Leaf tensor from raw row-major data.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::BadShape {
                op: "from_vec",
                shape: shape.to_vec(),
                reason: format!("shape wants {} elements, data has {}", numel, data.len()),
            });
        }
        Ok(Self::new_node(shape.to_vec(), data, false, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::new_node(shape.to_vec(), vec![T::zero(); numel], false, None)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel: usize = shape.iter().product();
        Self::new_node(shape.to_vec(), vec![value; numel], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::new_node(vec![], vec![value], false, None)
    }

    /// Mark a leaf as a differentiation target. Only valid on leaves; op
    /// outputs derive their flag from their parents.
    pub fn requires_grad(self) -> Self {
        assert!(
            self.node.op.is_none(),
            "requires_grad may only be set on leaf tensors"
        );
        Self::new_node(self.node.shape.clone(), self.node.data.clone(), true, None)
    }

    /// A leaf copy sharing the same values but cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::new_node(self.node.shape.clone(), self.node.data.clone(), false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn is_requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.op.is_none()
    }

    /// Scalar value of a 1-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.node.data[0]
    }

    /// Current accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    pub(crate) fn id(&self) -> u64 {
        self.node.id
    }

    /// Build an op-output tensor. The backward closure receives the upstream
    /// gradient and returns one optional gradient per parent, in order.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.node.requires_grad);
        if track {
            Self::new_node(shape, data, true, Some(OpNode { parents, backward }))
        } else {
            Self::new_node(shape, data, false, None)
        }
    }

    fn accumulate_leaf_grad(&self, g: &[T]) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, &x) in buf.iter_mut().zip(g) {
                    *b += x;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode gradient propagation from a scalar loss.
    ///
    /// Every reachable leaf with `requires_grad` gets its gradient buffer
    /// accumulated. Traversal order is a deterministic function of graph
    /// construction order.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss { len: self.numel() });
        }

        // Iterative post-order DFS for a deterministic topological order.
        let mut topo: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.node.id);
        while let Some((t, child)) = stack.pop() {
            let n_parents = t.node.op.as_ref().map_or(0, |op| op.parents.len());
            if child < n_parents {
                stack.push((t.clone(), child + 1));
                let p = t.node.op.as_ref().unwrap().parents[child].clone();
                if (p.node.requires_grad || p.node.op.is_some()) && visited.insert(p.node.id) {
                    stack.push((p, 0));
                }
            } else {
                topo.push(t);
            }
        }

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.node.id, vec![T::one()]);

        for node in topo.iter().rev() {
            let Some(g) = grads.remove(&node.node.id) else {
                continue;
            };
            if node.node.op.is_none() {
                if node.node.requires_grad {
                    node.accumulate_leaf_grad(&g);
                }
                continue;
            }
            let op = node.node.op.as_ref().unwrap();
            let contribs = (op.backward)(&g);
            debug_assert_eq!(contribs.len(), op.parents.len());
            for (parent, contrib) in op.parents.iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                debug_assert_eq!(c.len(), parent.numel());
                match grads.entry(parent.node.id) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        for (acc, &x) in e.get_mut().iter_mut().zip(&c) {
                            *acc += x;
                        }
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(c);
                    }
                }
            }
        }
        Ok(())
    }

    /// Shape helper for [N, C, H, W] tensors.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::BadShape {
                op,
                shape: self.shape().to_vec(),
                reason: "expected a 4-d [N,C,H,W] tensor".into(),
            }),
        }
    }

    /// Shape helper for [N, D] tensors.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape() {
            [n, d] => Ok((n, d)),
            _ => Err(Error::BadShape {
                op,
                shape: self.shape().to_vec(),
                reason: "expected a 2-d [N,D] tensor".into(),
            }),
        }
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data().iter().map(|x| x.as_f64() as f32).collect()
    }
}

/// A named learnable tensor.
///
/// The tensor is always a leaf with `requires_grad`; the name is the stable
/// key used for checkpoints, the optimizer state, and parameter audits.
#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let value = if value.is_requires_grad() {
            value
        } else {
            value.requires_grad()
        };
        Parameter {
            name: name.into(),
            value,
        }
    }

    /// Replace the underlying tensor (optimizer step), keeping the name.
    /// The stale graph referencing the old leaf is dropped with it.
    pub fn assign(&mut self, data: Vec<T>) {
        assert_eq!(data.len(), self.value.numel());
        let shape = self.value.shape().to_vec();
        self.value = Tensor::from_vec(&shape, data).unwrap().requires_grad();
    }
}

/// Visitor hook implemented by anything holding parameters.
pub trait HasParams<T: Scalar> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Parameter<T>));
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>));

    fn parameters(&self) -> Vec<Parameter<T>> {
        let mut out = Vec::new();
        self.for_each_param(&mut |p| out.push(p.clone()));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |p| n += p.value.numel());
        n
    }

    fn zero_grads(&self) {
        self.for_each_param(&mut |p| p.value.zero_grad());
    }
}
