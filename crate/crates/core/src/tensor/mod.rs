//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every tensor is a cheap handle onto shared storage. Operations build an
//! implicit computation graph; [`Tensor::backward`] linearizes it into a
//! [`ComputationRecord`] (a topological order over the executed operations)
//! and replays it in reverse, accumulating gradients into every tensor that
//! has `requires_grad` set. Gradients accumulate additively across backward
//! calls until [`Tensor::zero_grad`] resets them.

mod autograd;
mod container;
mod gradcheck;
mod ops;

pub use autograd::{conv2d_input_gradient, ComputationRecord};
pub use container::{read_tensor, write_tensor, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use gradcheck::{grad_check, grad_check_sampled};

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: kernel {k}x{k} exceeds padded input {h}x{w}")]
    KernelTooLarge {
        op: &'static str,
        k: usize,
        h: usize,
        w: usize,
    },
    #[error("{op}: stride must be positive")]
    ZeroStride { op: &'static str },
    #[error("{op}: expected rank-{expected} input, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("cannot reshape {from:?} ({from_len} elements) into {to:?} ({to_len} elements)")]
    BadReshape {
        from: Vec<usize>,
        from_len: usize,
        to: Vec<usize>,
        to_len: usize,
    },
    #[error("invalid tensor container: {0}")]
    Container(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(0);

/// What produced an op-tensor, together with everything its backward rule needs.
pub(crate) enum Rule {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Sum,
    Mean,
    Reshape,
    Relu,
    HardTanh,
    /// parents: [input `[N]`, weights `[D,N]`, bias `[D]`]
    Linear,
    /// parents: [input `[Ci,H,W]`, kernels `[Co,Ci,k,k]`, bias `[Co]`]
    Conv2d { stride: usize, padding: usize },
    /// parents: [input `[Ci,H,W]`, kernels `[Ci,Co,k,k]`, bias `[Co]`]
    TransposedConv2d { stride: usize, padding: usize },
    /// `argmax[j]` is the flat input index that won output element `j`.
    MaxPool2d { argmax: Vec<usize> },
    /// Stable softmax probabilities saved from the forward pass.
    SoftmaxCrossEntropy { label: usize, probs: Vec<f64> },
    /// Per-channel constant scaling; `scales[c]` multiplies channel `c`.
    ChannelScale { scales: Vec<f64> },
}

pub(crate) struct Recorded {
    pub(crate) parents: Vec<Tensor>,
    pub(crate) rule: Rule,
}

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
    /// For op-tensors: whether any ancestor requires grad, fixed at build time.
    tracked_at_build: bool,
    pub(crate) op: Option<Recorded>,
}

/// A dense n-dimensional array of f64 with optional gradient tracking.
pub struct Tensor {
    pub(crate) inner: Rc<Inner>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

impl Tensor {
    /// Leaf tensor from raw data. Panics if `data.len() != product(shape)`.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
                tracked_at_build: false,
                op: None,
            }),
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::new(vec![0.0; numel], shape)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::new(vec![value; numel], shape)
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(vec![value], &[])
    }

    pub(crate) fn from_op(data: Vec<f64>, shape: &[usize], parents: Vec<Tensor>, rule: Rule) -> Tensor {
        let numel: usize = shape.iter().product();
        debug_assert_eq!(data.len(), numel);
        let tracked = parents.iter().any(|p| p.tracked());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
                tracked_at_build: tracked,
                op: Some(Recorded { parents, rule }),
            }),
        }
    }

    /// Builder-style `requires_grad` toggle, for parameter construction.
    pub fn requires_grad(self, yes: bool) -> Tensor {
        self.inner.requires_grad.set(yes);
        self
    }

    pub fn set_requires_grad(&self, yes: bool) {
        self.inner.requires_grad.set(yes);
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Whether gradients should flow to or through this tensor.
    pub(crate) fn tracked(&self) -> bool {
        match self.inner.op {
            None => self.inner.requires_grad.get(),
            Some(_) => self.inner.tracked_at_build || self.inner.requires_grad.get(),
        }
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    /// Overwrite the stored values in place (parameter updates, perturbations).
    pub fn set_data(&self, data: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), data.len());
        d.copy_from_slice(data);
    }

    /// Mutate stored values through a closure; used by optimizers.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.data.borrow_mut());
    }

    /// Accumulated gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// A new leaf holding a copy of this tensor's values, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.to_vec(), &self.inner.shape.clone())
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.op.is_none()
    }

    /// True when every stored value is finite.
    pub fn all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    /// Run reverse-mode differentiation from this scalar.
    ///
    /// Gradients accumulate additively into every `requires_grad` tensor the
    /// graph reaches; call [`Tensor::zero_grad`] between independent passes.
    pub fn backward(&self) -> Result<(), TensorError> {
        autograd::backward(self)
    }
}
