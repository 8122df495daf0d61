//! Dense row-major tensors with tape-free reverse-mode differentiation.
//!
//! Every tensor produced by an operation keeps a reference to its inputs and
//! the operation that produced it; calling [`Tensor::backward`] on a scalar
//! walks that graph in reverse topological order and accumulates gradients
//! into the leaf tensors created with `requires_grad = true`.
//!
//! Tensors are immutable once created. Values can be shared freely across
//! threads; only the gradient buffer of a leaf is mutable, behind a mutex.

mod autograd;
mod conv;
mod element;
mod ops;

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

pub use element::{DType, Element};
pub(crate) use element::gemm;
pub use ops::{Activation, PoolKind};

use crate::error::{Error, Result};
use autograd::Op;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);
thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static CHECK_FINITE: Cell<bool> = const { Cell::new(false) };
}

/// Debug mode for the current thread: panic on the first non-finite value any
/// operation produces.
pub fn set_finite_check(enabled: bool) {
    CHECK_FINITE.with(|c| c.set(enabled));
}

pub fn finite_check_enabled() -> bool {
    CHECK_FINITE.with(|c| c.get())
}

/// Runs `f` without recording differentiation history on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub struct Tensor<E: Element> {
    node: Arc<Node<E>>,
}

struct Node<E: Element> {
    id: usize,
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<E>>>,
    op: Option<Op<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            node: Arc::clone(&self.node),
        }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<E> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

fn validate(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::Dimension(format!(
            "shape {shape:?} has a zero extent"
        )));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::Dimension(format!(
            "shape {shape:?} holds {numel} elements but {len} were given"
        )));
    }
    Ok(())
}

impl<E: Element> Tensor<E> {
    fn make(shape: Vec<usize>, data: Vec<E>, requires_grad: bool, op: Option<Op<E>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if finite_check_enabled() {
            if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
                panic!(
                    "non-finite value {} at flat index {pos} in tensor of shape {shape:?}",
                    data[pos]
                );
            }
        }
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                op,
            }),
        }
    }

    /// Result of a recorded operation. History is kept only when grad mode is
    /// on and some input requires grad.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<E>, op: Op<E>) -> Self {
        if grad_enabled() && op.any_input_requires_grad() {
            Self::make(shape, data, true, Some(op))
        } else {
            Self::make(shape, data, false, None)
        }
    }

    /// Constant tensor (no gradient).
    pub fn new(shape: &[usize], data: Vec<E>) -> Result<Self> {
        validate(shape, data.len())?;
        Ok(Self::make(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that accumulates gradients on [`backward`](Self::backward).
    pub fn leaf(shape: &[usize], data: Vec<E>) -> Result<Self> {
        validate(shape, data.len())?;
        Ok(Self::make(shape.to_vec(), data, true, None))
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| E::of(v)).collect())
    }

    pub fn scalar(value: E) -> Self {
        Self::make(Vec::new(), vec![value], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, E::zero())
    }

    pub fn full(shape: &[usize], value: E) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn ndim(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.node.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.node.data.iter().map(|v| v.as_f64()).collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.op.is_none()
    }

    /// Unique identity of the underlying node; clones share it.
    pub fn id(&self) -> usize {
        self.node.id
    }

    fn grad_lock(&self) -> MutexGuard<'_, Option<Vec<E>>> {
        self.node
            .grad
            .lock()
            .unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    /// Accumulated gradient, if any backward pass reached this leaf.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.grad_lock().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.grad_lock().is_some()
    }

    pub fn zero_grad(&self) {
        *self.grad_lock() = None;
    }

    pub(crate) fn set_grad(&self, grad: Option<Vec<E>>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.numel());
        }
        *self.grad_lock() = grad;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[E]) {
        let mut guard = self.grad_lock();
        match guard.as_mut() {
            Some(g) => {
                for (a, &d) in g.iter_mut().zip(delta) {
                    *a = *a + d;
                }
            }
            None => *guard = Some(delta.to_vec()),
        }
    }

    /// Copy of the values with no history.
    pub fn detach(&self) -> Self {
        Self::make(self.node.shape.clone(), self.node.data.clone(), false, None)
    }

    pub fn all_finite(&self) -> bool {
        self.node.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn op(&self) -> Option<&Op<E>> {
        self.node.op.as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f64>::new(&[2, 3], vec![0.0; 5]),
            Err(Error::Dimension(_))
        ));
        assert!(Tensor::<f64>::new(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn no_grad_drops_history() {
        let x = Tensor::<f64>::leaf(&[2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| x.relu());
        assert!(!y.requires_grad());
        assert!(grad_enabled());
        let z = x.relu();
        assert!(z.requires_grad() && !z.is_leaf());
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn finite_check_catches_nan() {
        set_finite_check(true);
        let r = std::panic::catch_unwind(|| Tensor::<f64>::new(&[1], vec![f64::NAN]));
        set_finite_check(false);
        if let Err(e) = r {
            std::panic::resume_unwind(e);
        }
    }
}
