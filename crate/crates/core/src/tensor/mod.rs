//! Dense tensors with a reverse-mode automatic differentiation tape.
//!
//! Training runs in `f32`; oracle tests instantiate the same operations in
//! `f64` so finite-difference gradient checks are not limited by single
//! precision. A [`Graph`] records one forward pass; [`Graph::backward`]
//! replays it in reverse, accumulates gradients into every reachable tensor
//! with `requires_grad`, and consumes the tape. Calling `backward` twice on
//! the same tape is a contract violation.
//!
//! Tensors are cheap handles (`Rc` around the storage). Cloning a tensor
//! aliases its data and gradient, which is how parameter stores and the
//! optimizer observe gradients written by `backward`.

pub mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Element type of a tensor. Implemented for `f32` and `f64` only.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + 'static
{
    const DTYPE: &'static str;
    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Raw bit pattern widened to u64, for bitwise identity checks.
    fn to_bits64(self) -> u64;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn to_bits64(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    fn of_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn to_bits64(self) -> u64 {
        self.to_bits()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

struct Inner<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    /// (graph id, node index) when this tensor was produced by a recorded op.
    node: Option<(u64, usize)>,
}

/// Shared handle to tensor storage. Clones alias the same data and gradient.
pub struct Tensor<F: Scalar> {
    inner: Rc<RefCell<Inner<F>>>,
}

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        write!(
            f,
            "Tensor<{}> shape={:?} requires_grad={}",
            F::DTYPE,
            inner.shape,
            inner.requires_grad
        )
    }
}

impl<F: Scalar> Tensor<F> {
    fn build(shape: Vec<usize>, data: Vec<F>, requires_grad: bool) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} implies {} elements, data has {}", shape, numel_of(&shape), data.len()),
            ));
        }
        Ok(Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                grad: None,
                requires_grad,
                node: None,
            })),
        })
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        Self::build(shape.to_vec(), data, false)
    }

    /// Leaf tensor that accumulates gradients (a parameter or checked input).
    pub fn leaf(shape: &[usize], data: Vec<F>) -> Result<Self> {
        Self::build(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![F::zero(); numel_of(shape)], false).expect("consistent")
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        Self::build(shape.to_vec(), vec![value; numel_of(shape)], false).expect("consistent")
    }

    pub fn scalar(value: F) -> Self {
        Self::full(&[1], value)
    }

    /// Constant tensor from f64 literals; handy in tests and for targets.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::build(shape.to_vec(), data.iter().map(|&x| F::of_f64(x)).collect(), false)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Copy of the underlying data.
    pub fn data(&self) -> Vec<F> {
        self.inner.borrow().data.clone()
    }

    /// Borrow the data in place without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[F]) -> R) -> R {
        f(&self.inner.borrow().data)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<F> {
        let inner = self.inner.borrow();
        if inner.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() requires a single-element tensor, shape is {:?}",
                inner.shape
            )));
        }
        Ok(inner.data[0])
    }

    pub fn grad(&self) -> Option<Vec<F>> {
        self.inner.borrow().grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.inner.borrow_mut().requires_grad = flag;
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrite the stored values in place. Shape must be preserved; the
    /// tape, if any, is not informed (callers only mutate leaves between
    /// forward passes).
    pub fn set_data(&self, data: Vec<F>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if data.len() != inner.data.len() {
            return Err(Error::shape(
                "set_data",
                format!("tensor has {} elements, new data has {}", inner.data.len(), data.len()),
            ));
        }
        inner.data = data;
        Ok(())
    }

    /// Copy of this tensor's values with gradient tracking severed.
    pub fn detach(&self) -> Tensor<F> {
        let inner = self.inner.borrow();
        Tensor::build(inner.shape.clone(), inner.data.clone(), false).expect("consistent")
    }

    /// Bit patterns of the data, for byte-identity assertions.
    pub fn bits(&self) -> Vec<u64> {
        self.inner.borrow().data.iter().map(|v| v.to_bits64()).collect()
    }

    pub(crate) fn data_ref(&self) -> Ref<'_, Vec<F>> {
        Ref::map(self.inner.borrow(), |i| &i.data)
    }

    pub(crate) fn node(&self) -> Option<(u64, usize)> {
        self.inner.borrow().node
    }

    fn set_node(&self, graph_id: u64, index: usize) {
        self.inner.borrow_mut().node = Some((graph_id, index));
    }

    pub(crate) fn grad_clone(&self) -> Option<Vec<F>> {
        self.inner.borrow().grad.clone()
    }

    /// Add `delta` into the gradient buffer, allocating zeros on first use.
    /// No-op unless the tensor requires gradients.
    pub(crate) fn accumulate_grad(&self, delta: &[F]) {
        let mut inner = self.inner.borrow_mut();
        if !inner.requires_grad {
            return;
        }
        debug_assert_eq!(inner.data.len(), delta.len());
        let n = inner.data.len();
        let grad = inner.grad.get_or_insert_with(|| vec![F::zero(); n]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    fn seed_unit_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.data.len();
        let grad = inner.grad.get_or_insert_with(|| vec![F::zero(); n]);
        for g in grad.iter_mut() {
            *g = F::one();
        }
    }
}

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// One forward pass worth of tape. Ops record a backward step per output;
/// `backward` runs the steps in reverse creation order (a valid reverse
/// topological order) and then clears the tape.
pub struct Graph<F: Scalar> {
    id: u64,
    recording: bool,
    consumed: Cell<bool>,
    nodes: RefCell<Vec<Box<dyn Fn()>>>,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar> Graph<F> {
    /// Tape that records backward steps for gradient computation.
    pub fn recording() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            recording: true,
            consumed: Cell::new(false),
            nodes: RefCell::new(Vec::new()),
            _marker: std::marker::PhantomData,
        }
    }

    /// Forward-only scope: no backward steps are recorded, outputs never
    /// receive tape nodes.
    pub fn inference() -> Self {
        Graph { recording: false, ..Self::recording() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording && !self.consumed.get()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// True when the op must record a backward step: the tape is live and at
    /// least one input participates in gradients (a tensor with
    /// `requires_grad == false` never receives a tape node).
    pub(crate) fn track(&self, inputs: &[&Tensor<F>]) -> bool {
        self.is_recording() && inputs.iter().any(|t| t.requires_grad())
    }

    /// Mark `out` as produced on this tape and store its backward step.
    pub(crate) fn register(&self, out: &Tensor<F>, step: Box<dyn Fn()>) {
        let mut nodes = self.nodes.borrow_mut();
        out.set_node(self.id, nodes.len());
        out.set_requires_grad(true);
        nodes.push(step);
    }

    /// Reverse pass from a scalar loss. Accumulates gradients into every
    /// `requires_grad` tensor reachable on this tape, then consumes the tape.
    pub fn backward(&self, loss: &Tensor<F>) -> Result<()> {
        if self.consumed.get() {
            return Err(Error::Contract(
                "backward called twice on the same tape; re-run the forward pass first".into(),
            ));
        }
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        match loss.node() {
            Some((gid, _)) if gid == self.id => {}
            _ => {
                return Err(Error::Contract(
                    "loss tensor is not connected to this tape".into(),
                ))
            }
        }
        loss.seed_unit_grad();
        let nodes = self.nodes.borrow();
        for step in nodes.iter().rev() {
            step();
        }
        drop(nodes);
        self.consumed.set(true);
        self.nodes.borrow_mut().clear();
        Ok(())
    }
}
