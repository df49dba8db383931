use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::rng::RngState;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub(crate) type BackwardFn = Box<dyn Fn(&[f64])>;

/// Dense row-major f64 tensor participating in a dynamic reverse-mode
/// differentiation graph.
///
/// A `Tensor` is a cheap handle (`Rc`) onto an immutable node. Values are
/// never mutated after creation except for two sanctioned cases: gradient
/// accumulation during [`Tensor::backward`], and in-place parameter updates
/// by the optimizer between steps (at which point the previous step's graph
/// is already discarded). Graphs are rebuilt every step and are confined to
/// a single thread.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorNode>,
}

pub(crate) struct TensorNode {
    id: u64,
    shape: Vec<usize>,
    data: Rc<RefCell<Vec<f64>>>,
    requires_grad: bool,
    /// True when this node or any ancestor requires gradients.
    needs_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("data", &self.inner.data.borrow())
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn from_node(node: TensorNode) -> Self {
        Tensor { inner: Rc::new(node) }
    }

    /// Leaf tensor without gradient tracking.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    /// Leaf tensor that accumulates gradients (a trainable parameter).
    pub fn parameter(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self::leaf(shape.to_vec(), data, true))
    }

    pub fn scalar(v: f64) -> Self {
        Self::leaf(vec![1], vec![v], false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(shape.to_vec(), vec![0.0; numel_of(shape)], false)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::leaf(shape.to_vec(), vec![v; numel_of(shape)], false)
    }

    /// Standard-normal leaf drawn from `rng`.
    pub fn randn(shape: &[usize], rng: &mut RngState) -> Self {
        Self::leaf(shape.to_vec(), rng.normal_vec(numel_of(shape)), false)
    }

    pub(crate) fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        Self::from_node(TensorNode {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: Rc::new(RefCell::new(data)),
            requires_grad,
            needs_grad: requires_grad,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward_fn: None,
        })
    }

    /// Interior node produced by an operation.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward_fn: BackwardFn,
    ) -> Self {
        Self::from_op_shared(shape, Rc::new(RefCell::new(data)), parents, backward_fn)
    }

    /// Like [`Tensor::from_op`] but takes an already-shared buffer, so the
    /// backward closure can capture the output values (exp, softmax, ...)
    /// or alias the parent's buffer (reshape).
    pub(crate) fn from_op_shared(
        shape: Vec<usize>,
        data: Rc<RefCell<Vec<f64>>>,
        parents: Vec<Tensor>,
        backward_fn: BackwardFn,
    ) -> Self {
        let needs_grad = parents.iter().any(|p| p.inner.needs_grad);
        Self::from_node(TensorNode {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad: false,
            needs_grad,
            grad: RefCell::new(None),
            parents: if needs_grad { parents } else { Vec::new() },
            backward_fn: if needs_grad { Some(backward_fn) } else { None },
        })
    }

    pub(crate) fn data_rc(&self) -> Rc<RefCell<Vec<f64>>> {
        Rc::clone(&self.inner.data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn needs_grad(&self) -> bool {
        self.inner.needs_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Shares the value buffer but severs the graph; gradients never flow
    /// through a detached tensor.
    pub fn detach(&self) -> Tensor {
        Self::from_node(TensorNode {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape: self.inner.shape.clone(),
            data: Rc::clone(&self.inner.data),
            requires_grad: false,
            needs_grad: false,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward_fn: None,
        })
    }

    /// In-place overwrite of a leaf's values. Only the optimizer and
    /// checkpoint loader call this, between steps, when no live graph
    /// references the previous values.
    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::InvalidArgument(format!(
                "set_data: {} values for shape {:?}",
                values.len(),
                self.shape()
            )));
        }
        self.inner.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode pass from a scalar. Populates `grad` on every
    /// gradient-requiring ancestor; repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward() requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let order = self.topo_order();
        // Interior adjoints are scratch for this pass; only leaf grads
        // persist and accumulate across calls.
        for node in &order {
            if node.inner.backward_fn.is_some() {
                *node.inner.grad.borrow_mut() = None;
            }
        }
        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            if let Some(f) = &node.inner.backward_fn {
                let g = node.inner.grad.borrow();
                if let Some(g) = g.as_ref() {
                    f(g);
                }
            }
        }
        Ok(())
    }

    /// Parents-before-children ordering of the subgraph reachable from
    /// `self`, independent of node id values.
    fn topo_order(&self) -> Vec<Tensor> {
        enum Frame {
            Enter(Tensor),
            Exit(Tensor),
        }
        let mut visited: HashSet<u64> = HashSet::new();
        let mut order = Vec::new();
        let mut stack = vec![Frame::Enter(self.clone())];
        while let Some(frame) = stack.pop() {
            match frame {
                Frame::Enter(t) => {
                    if !visited.insert(t.inner.id) {
                        continue;
                    }
                    stack.push(Frame::Exit(t.clone()));
                    for p in &t.inner.parents {
                        if !visited.contains(&p.inner.id) {
                            stack.push(Frame::Enter(p.clone()));
                        }
                    }
                }
                Frame::Exit(t) => order.push(t),
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0]).is_err());
        assert!(Tensor::from_vec(&[2, 2], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::parameter(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(x.backward().is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::parameter(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = x.sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        // loss = x^2 at x = 3 -> dloss/dx = 6
        let x = Tensor::parameter(&[1], vec![3.0]).unwrap();
        let loss = x.square().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::parameter(&[2], vec![1.0, 1.0]).unwrap();
        let loss = x.sum_all();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn detach_blocks_gradients_but_shares_values() {
        let x = Tensor::parameter(&[2], vec![2.0, 4.0]).unwrap();
        let d = x.detach();
        assert_eq!(d.to_vec(), x.to_vec());
        let loss = d.square().sum_all();
        loss.backward().unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // loss = x*x + x  -> grad = 2x + 1 = 5 at x=2
        let x = Tensor::parameter(&[1], vec![2.0]).unwrap();
        let loss = x.mul(&x).unwrap().add(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0]);
    }
}
