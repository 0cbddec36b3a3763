//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! Every differentiable operation records its parent tensors and a closure
//! that maps the upstream gradient to per-parent gradients. [`Tensor::backward`]
//! walks the graph once in reverse topological order; gradients land in the
//! `grad` slot of `requires_grad` leaves and accumulate there across calls
//! until cleared with [`Tensor::zero_grad`].

mod gradcheck;
mod ops;

pub use gradcheck::{finite_diff_check, finite_diff_check_multi, DEFAULT_FD_EPS};
pub use ops::{concat_last, cross_entropy_smoothed, embedding_lookup, Activation};

use std::collections::hash_map::Entry;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use num_traits::{Float, NumAssign};
use rand::distributions::uniform::SampleUniform;
use thiserror::Error;

/// Element type of a tensor: `f64` for gradient verification, `f32` for
/// fast training. Exposes the GEMM kernel so higher ops stay precision-generic.
pub trait Scalar:
    Float + NumAssign + SampleUniform + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    /// Byte width written into checkpoint headers (4 or 8).
    const PREC_FLAG: u8;
    /// Additive pre-softmax mask value; large enough that the masked weight
    /// underflows to exactly zero after exponentiation.
    const MASK_NEG: Self;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// C ← alpha·A·B + beta·C over raw buffers with explicit strides.
    ///
    /// # Safety
    /// Pointers must cover m×k, k×n and m×n elements under the given strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const PREC_FLAG: u8 = 4;
    const MASK_NEG: Self = -1e9;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const PREC_FLAG: u8 = 8;
    const MASK_NEG: Self = -1e30;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Errors raised by tensor construction and operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: length {len} not divisible by {stride}")]
    NotDivisible {
        op: &'static str,
        len: usize,
        stride: usize,
    },
    #[error("conv width {0} outside supported range 1..=8")]
    ConvWidth(usize),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    IdOutOfRange { id: u32, vocab: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

/// Dense row-major n-dimensional array, cheaply clonable (shared storage).
pub struct Tensor<T: Scalar> {
    inner: Arc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: self.inner.clone(),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

fn check_shape(op: &'static str, shape: &[usize], len: usize) -> Result<(), TensorError> {
    if shape.iter().any(|&d| d == 0) {
        return Err(invalid(op, format!("zero dimension in shape {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(invalid(
            op,
            format!("shape {shape:?} wants {numel} values, got {len}"),
        ));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    fn alloc(
        shape: Vec<usize>,
        data: Arc<Vec<T>>,
        requires_grad: bool,
        parents: Vec<Tensor<T>>,
        backward: Option<BackwardFn<T>>,
    ) -> Self {
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                parents,
                backward,
            }),
        }
    }

    /// Constant leaf; participates in graphs but never receives a gradient.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        check_shape("from_vec", &shape, data.len())?;
        Ok(Self::alloc(shape, Arc::new(data), false, Vec::new(), None))
    }

    /// Leaf that accumulates gradients across backward calls.
    pub fn param(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        check_shape("param", &shape, data.len())?;
        Ok(Self::alloc(shape, Arc::new(data), true, Vec::new(), None))
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let numel = shape.iter().product();
        Self::from_vec(shape, vec![T::zero(); numel])
    }

    pub fn full(shape: Vec<usize>, value: T) -> Result<Self, TensorError> {
        let numel = shape.iter().product();
        Self::from_vec(shape, vec![value; numel])
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: T) -> Self {
        Self::alloc(Vec::new(), Arc::new(vec![value]), false, Vec::new(), None)
    }

    pub(crate) fn node(
        shape: Vec<usize>,
        data: Arc<Vec<T>>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self::alloc(shape, data, false, parents, Some(backward))
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        self.inner.data.clone()
    }

    /// The single value of a rank-0/one-element tensor.
    ///
    /// Panics when the tensor holds more than one value.
    pub fn item(&self) -> T {
        assert!(
            self.numel() == 1,
            "item() on tensor of shape {:?}",
            self.shape()
        );
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True when backward will propagate through this tensor.
    pub fn tracks_grad(&self) -> bool {
        self.inner.requires_grad || self.inner.backward.is_some()
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    /// Leaf sharing this tensor's storage with gradient tracking removed.
    pub fn detach(&self) -> Tensor<T> {
        Self::alloc(
            self.inner.shape.clone(),
            self.inner.data.clone(),
            false,
            Vec::new(),
            None,
        )
    }

    /// Reverse-mode differentiation from a scalar loss.
    ///
    /// Populates `grad` on every reachable `requires_grad` leaf; repeated
    /// calls keep adding until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.shape().to_vec()));
        }
        if !self.tracks_grad() {
            return Ok(());
        }

        // Iterative DFS postorder: each node lands after all of its parents,
        // so the reversed order visits every consumer before its producers.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((node, start)) = stack.pop() {
            let mut advanced = false;
            let mut i = start;
            while i < node.inner.parents.len() {
                let p = &node.inner.parents[i];
                if p.tracks_grad() && !visited.contains(&p.id()) {
                    visited.insert(p.id());
                    let child = p.clone();
                    stack.push((node.clone(), i + 1));
                    stack.push((child, 0));
                    advanced = true;
                    break;
                }
                i += 1;
            }
            if !advanced {
                order.push(node);
            }
        }

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            if node.inner.requires_grad {
                let mut slot = node.inner.grad.lock().unwrap();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += *b;
                        }
                    }
                    None => *slot = Some(g.clone()),
                }
            }
            if let Some(f) = &node.inner.backward {
                let contribs = f(&g);
                debug_assert_eq!(contribs.len(), node.inner.parents.len());
                for (p, c) in node.inner.parents.iter().zip(contribs) {
                    let Some(c) = c else { continue };
                    if !p.tracks_grad() {
                        continue;
                    }
                    debug_assert_eq!(c.len(), p.numel());
                    match grads.entry(p.id()) {
                        Entry::Occupied(mut e) => {
                            for (a, b) in e.get_mut().iter_mut().zip(&c) {
                                *a += *b;
                            }
                        }
                        Entry::Vacant(e) => {
                            e.insert(c);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
