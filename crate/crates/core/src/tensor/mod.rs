//! Dense `f32` tensors with eager reverse-mode differentiation.
//!
//! Every operation records its parents and a backward rule when at least one
//! input requires a gradient. The graph is implicit in those records; node ids
//! increase with creation order, so reverse id order is a valid topological
//! order for the backward sweep.

mod conv;
pub mod gradcheck;
pub mod io;
mod kernels;
mod nn;
mod ops;

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_err, Error, Result};

pub use conv::{conv2d, depthwise_conv2d, depthwise_separable_conv, transposed_conv2d};
pub use gradcheck::{grad_check, GradCheckReport};
pub use nn::{
    bce_with_logits, global_avg_pool, layer_norm, log_softmax, max_pool2, upsample_nearest2,
};
pub use ops::{matmul, Elementwise};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Gradient rule: given the output gradient and a per-parent "needs grad"
/// mask, return one gradient buffer per parent (or `None` when not needed).
pub(crate) type BackwardFn = Box<dyn Fn(&[f32], &[bool]) -> Vec<Option<Vec<f32>>>>;

struct Node {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f32>>>,
    node: Option<Node>,
}

/// Reference-counted handle to an immutable tensor value.
///
/// Cloning is cheap and shares the underlying buffer. Only the gradient slot
/// is mutable.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            node,
        }))
    }

    /// Constant tensor (no gradient).
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        Self::check_shape(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that accumulates a gradient during `backward`.
    pub fn param(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        Self::check_shape(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![0.0; numel(shape)], false, None)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self::build(shape.to_vec(), vec![value; numel(shape)], false, None)
    }

    pub fn scalar(value: f32) -> Self {
        Self::build(vec![1], vec![value], false, None)
    }

    /// 1-D constant from a slice.
    pub fn vector(values: &[f32]) -> Self {
        Self::build(vec![values.len()], values.to_vec(), false, None)
    }

    fn check_shape(shape: &[usize], len: usize) -> Result<()> {
        if shape.contains(&0) {
            return Err(shape_err!("zero-sized dimension in {shape:?}"));
        }
        if numel(shape) != len {
            return Err(shape_err!("shape {shape:?} needs {} elements, got {len}", numel(shape)));
        }
        Ok(())
    }

    /// Record the result of an operation. The output is checked for
    /// non-finite values; when no parent requires a gradient the backward
    /// rule is dropped immediately.
    pub(crate) fn from_op(
        op: &str,
        shape: Vec<usize>,
        data: Vec<f32>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Self> {
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerics(format!(
                "{op} produced non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = requires_grad.then(|| Node { parents, backward });
        Ok(Self::build(shape, data, requires_grad, node))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Accumulated gradient, if any has been written.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Copy of the value without any graph history.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(shape_err!("item() on tensor of shape {:?}", self.shape()));
        }
        Ok(self.0.data[0])
    }

    fn accumulate_grad(&self, g: &[f32]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse sweep from a scalar loss. Gradients of leaf tensors that
    /// require them are added to their gradient slots; repeated calls keep
    /// accumulating.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got shape {:?}", self.shape()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        // Collect the reachable sub-graph of nodes that require grad.
        let mut nodes: BTreeMap<u64, Tensor> = BTreeMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || nodes.contains_key(&t.id()) {
                continue;
            }
            if let Some(node) = &t.0.node {
                stack.extend(node.parents.iter().cloned());
            }
            nodes.insert(t.id(), t);
        }

        let mut pending: HashMap<u64, Vec<f32>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for (_, t) in nodes.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else { continue };
            match &t.0.node {
                None => t.accumulate_grad(&g),
                Some(node) => {
                    let needs: Vec<bool> = node.parents.iter().map(|p| p.requires_grad()).collect();
                    let grads = (node.backward)(&g, &needs);
                    for ((parent, pg), need) in node.parents.iter().zip(grads).zip(needs) {
                        let (Some(pg), true) = (pg, need) else { continue };
                        debug_assert_eq!(pg.len(), parent.numel());
                        match pending.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(parent.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
