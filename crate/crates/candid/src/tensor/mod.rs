//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle (reference-counted) onto a node of a
//! dynamically built computation graph. Every operation records its parents
//! and a backward rule; [`Tensor::backward`] walks the graph in reverse
//! topological order and accumulates gradients into every reachable node
//! that requires them.
//!
//! Leaf gradients accumulate additively across calls; callers must invoke
//! [`Tensor::zero_grad`] between optimizer steps. Calling `backward` twice on
//! the same graph adds the identical contribution again (interior node
//! gradients are per-sweep scratch), which is the documented deterministic
//! contract.

mod adam;
mod conv;
mod ops;
#[cfg(test)]
mod tests;

pub use adam::{adam_step, AdamState};
pub use conv::Padding;

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("data length {len} does not match dims {dims:?}")]
    LengthMismatch { len: usize, dims: Vec<usize> },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar tensor, got dims {0:?}")]
    NotScalar(Vec<usize>),
    #[error("axis {axis} out of range for dims {dims:?}")]
    InvalidAxis { axis: usize, dims: Vec<usize> },
    #[error("convolution kernel size must be odd, got {0}")]
    EvenKernel(usize),
    #[error("input {input}x{input2} too small for valid convolution with k={k}")]
    InputTooSmall { input: usize, input2: usize, k: usize },
    #[error("missing gradient on parameter {0}")]
    MissingGrad(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Backward rule of one graph node: distribute `grad_out` to the parents.
pub(crate) trait Backward {
    fn backward(&self, grad_out: &[f32], parents: &[Tensor]) -> Result<()>;
}

struct Inner {
    dims: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    op: Option<Box<dyn Backward>>,
}

/// Handle onto a node of the autodiff graph. Cloning is O(1).
#[derive(Clone)]
pub struct Tensor(Rc<RefCell<Inner>>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.0.borrow();
        f.debug_struct("Tensor")
            .field("dims", &inner.dims)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

pub(crate) fn all_finite(data: &[f32]) -> bool {
    data.iter().all(|v| v.is_finite())
}

impl Tensor {
    /// Leaf tensor from raw data. Rejects non-finite values and size mismatches.
    pub fn new(dims: &[usize], data: Vec<f32>, requires_grad: bool) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(TensorError::LengthMismatch { len: data.len(), dims: dims.to_vec() });
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(TensorError::Invalid(format!("zero extent in dims {dims:?}")));
        }
        if !all_finite(&data) {
            return Err(TensorError::NonFinite { op: "new" });
        }
        Ok(Tensor(Rc::new(RefCell::new(Inner {
            dims: dims.to_vec(),
            data,
            grad: None,
            requires_grad,
            parents: Vec::new(),
            op: None,
        }))))
    }

    pub fn zeros(dims: &[usize]) -> Tensor {
        let n: usize = dims.iter().product();
        Tensor::new(dims, vec![0.0; n], false).expect("zeros")
    }

    pub fn scalar(v: f32) -> Result<Tensor> {
        Tensor::new(&[1], vec![v], false)
    }

    /// Interior node produced by an operation.
    pub(crate) fn from_op(
        dims: Vec<usize>,
        data: Vec<f32>,
        parents: Vec<Tensor>,
        op: Box<dyn Backward>,
        name: &'static str,
    ) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        debug_assert_eq!(n, data.len());
        if !all_finite(&data) {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        Ok(Tensor(Rc::new(RefCell::new(Inner {
            dims,
            data,
            grad: None,
            requires_grad,
            parents,
            op: Some(op),
        }))))
    }

    pub fn dims(&self) -> Vec<usize> {
        self.0.borrow().dims.clone()
    }

    pub fn len(&self) -> usize {
        self.0.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn data(&self) -> Ref<'_, [f32]> {
        Ref::map(self.0.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.borrow().data.clone()
    }

    pub fn item(&self) -> Result<f32> {
        let inner = self.0.borrow();
        if inner.data.len() != 1 {
            return Err(TensorError::NotScalar(inner.dims.clone()));
        }
        Ok(inner.data[0])
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Overwrite the stored values in place (dims must match). Used by the
    /// optimizer; does not touch the gradient.
    pub fn set_data(&self, data: &[f32]) -> Result<()> {
        let mut inner = self.0.borrow_mut();
        if data.len() != inner.data.len() {
            return Err(TensorError::LengthMismatch { len: data.len(), dims: inner.dims.clone() });
        }
        if !all_finite(data) {
            return Err(TensorError::NonFinite { op: "set_data" });
        }
        inner.data.copy_from_slice(data);
        Ok(())
    }

    /// Constant copy cut off from the graph.
    pub fn detach(&self) -> Tensor {
        let inner = self.0.borrow();
        Tensor(Rc::new(RefCell::new(Inner {
            dims: inner.dims.clone(),
            data: inner.data.clone(),
            grad: None,
            requires_grad: false,
            parents: Vec::new(),
            op: None,
        })))
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[f32]) {
        let mut inner = self.0.borrow_mut();
        if !inner.requires_grad {
            return;
        }
        match &mut inner.grad {
            Some(g) => {
                for (gi, &c) in g.iter_mut().zip(contribution) {
                    *gi += c;
                }
            }
            None => inner.grad = Some(contribution.to_vec()),
        }
    }

    fn ptr(&self) -> *const RefCell<Inner> {
        Rc::as_ptr(&self.0)
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
    /// reachable tensor with `requires_grad`.
    pub fn backward(&self) -> Result<()> {
        {
            let inner = self.0.borrow();
            if inner.data.len() != 1 {
                return Err(TensorError::NotScalar(inner.dims.clone()));
            }
        }
        // Iterative post-order DFS; recursion would overflow on deep graphs.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<*const RefCell<Inner>> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.ptr());
        while let Some((node, child_idx)) = stack.pop() {
            let next = {
                let inner = node.0.borrow();
                inner.parents.get(child_idx).cloned()
            };
            match next {
                Some(parent) => {
                    stack.push((node, child_idx + 1));
                    if parent.requires_grad() && visited.insert(parent.ptr()) {
                        stack.push((parent, 0));
                    }
                }
                None => order.push(node),
            }
        }
        // Interior gradients are per-sweep scratch; only leaves accumulate
        // across calls. Without this reset a second backward would compound
        // stale interior grads instead of adding an identical contribution.
        for node in &order {
            let mut inner = node.0.borrow_mut();
            if inner.op.is_some() {
                inner.grad = None;
            }
        }
        self.accumulate_grad_seed();
        for node in order.iter().rev() {
            let (grad, parents) = {
                let inner = node.0.borrow();
                if inner.op.is_none() || inner.grad.is_none() {
                    continue;
                }
                (inner.grad.clone().unwrap(), inner.parents.clone())
            };
            if !all_finite(&grad) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            let inner = node.0.borrow();
            inner.op.as_ref().unwrap().backward(&grad, &parents)?;
        }
        Ok(())
    }

    fn accumulate_grad_seed(&self) {
        let mut inner = self.0.borrow_mut();
        if !inner.requires_grad {
            // A loss that depends on no trainable tensor: nothing to do.
            return;
        }
        match &mut inner.grad {
            Some(g) => g[0] += 1.0,
            None => inner.grad = Some(vec![1.0]),
        }
    }
}
