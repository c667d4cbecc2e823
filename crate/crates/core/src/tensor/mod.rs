//! Dense `f64` tensors with a dynamically built reverse-mode autodiff graph.
//!
//! Every op that touches a tensor with `requires_grad` records a node holding
//! its parents and a vector-Jacobian closure. The graph lives as long as the
//! output tensors do; dropping the loss frees it. `backward` may be called
//! more than once on the same graph and accumulates into leaf gradients.

mod gradcheck;
mod kernels;
mod ops;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis { op: &'static str, axis: usize, shape: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("gradient check aborted: objective is not deterministic ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Vector-Jacobian product: receives the output gradient and the parents,
/// returns one optional gradient per parent (`None` when it needs none).
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[Tensor]) -> Vec<Option<Vec<f64>>>>;

pub(crate) struct Node {
    op: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
    node: Option<Node>,
}

/// Reference-counted handle; cloning shares storage.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.0.node.as_ref().map(|n| n.op))
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Constant leaf tensor.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if shape.contains(&0) || numel(shape) != data.len() {
            return Err(TensorError::DataLength { len: data.len(), shape: shape.to_vec() });
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Trainable leaf tensor with a zeroed gradient buffer.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn scalar(v: f64) -> Self {
        Self::leaf(vec![v], Vec::new(), false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(vec![0.0; numel(shape)], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::leaf(vec![v; numel(shape)], shape.to_vec(), false)
    }

    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Self {
        let grad = requires_grad.then(|| vec![0.0; data.len()]);
        Tensor(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(grad),
            requires_grad: Cell::new(requires_grad),
            node: None,
        }))
    }

    /// Builds an op output. A node is only attached when some parent needs
    /// gradients, so graph-free inference costs nothing extra.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        op: &'static str,
        parents: &[&Tensor],
        backward: impl Fn(&[f64], &[Tensor]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        let needs = parents.iter().any(|p| p.requires_grad());
        if !needs {
            return Self::leaf(data, shape, false);
        }
        Tensor(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(true),
            node: Some(Node {
                op,
                parents: parents.iter().map(|p| (*p).clone()).collect(),
                backward: Box::new(backward),
            }),
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// Mutable access to the values. Only meaningful on leaves (optimizer
    /// updates, checkpoint loads, finite-difference probes).
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.0.data.borrow();
        debug_assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        d[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Toggles gradient tracking on a leaf. Enabling allocates a zero
    /// gradient; disabling drops it.
    pub fn set_requires_grad(&self, on: bool) {
        assert!(self.is_leaf(), "requires_grad can only be toggled on leaves");
        self.0.requires_grad.set(on);
        let mut g = self.0.grad.borrow_mut();
        if on {
            if g.is_none() {
                *g = Some(vec![0.0; self.numel()]);
            }
        } else {
            *g = None;
        }
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<f64>>> {
        self.0.grad.borrow()
    }

    pub fn grad_ref_mut(&self) -> RefMut<'_, Option<Vec<f64>>> {
        self.0.grad.borrow_mut()
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.0.grad.borrow_mut().as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Same values, no graph node, no gradient tracking.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.to_vec(), self.0.shape.clone(), false)
    }

    /// Identity of the underlying storage; clones share it.
    pub fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Accumulates d(self)/d(leaf) into every reachable leaf that requires
    /// gradients.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.ptr_id(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.ptr_id()) else {
                continue;
            };
            match &t.0.node {
                None => {
                    if let Some(acc) = t.0.grad.borrow_mut().as_mut() {
                        acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                }
                Some(node) => {
                    let pgrads = (node.backward)(&g, &node.parents);
                    debug_assert_eq!(pgrads.len(), node.parents.len(), "op {}", node.op);
                    for (p, pg) in node.parents.iter().zip(pgrads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "op {}", node.op);
                        match grads.get_mut(&p.ptr_id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(p.ptr_id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over nodes that require gradients, iterative to survive
    /// deep graphs.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.ptr_id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for p in &node.parents {
                    if p.requires_grad() && !visited.contains(&p.ptr_id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}
