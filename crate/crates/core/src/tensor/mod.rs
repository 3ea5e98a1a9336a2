//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap, clonable handle onto immutable data. Operations
//! executed while gradient recording is enabled (the default, see
//! [`no_grad`]) and with at least one input that requires a gradient attach a
//! backward rule to their output. Calling [`Tensor::backward`] on a scalar
//! builds the [`Tape`] of recorded operations reachable from it and replays it
//! in reverse, accumulating gradients into every participating tensor.

mod autograd;
mod linalg;
mod nn;
mod ops;
mod shape;

use std::cell::Cell;
use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use autograd::Tape;

use crate::{Error, Result};

/// Storage precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "single" => Ok(DType::F32),
            "f64" | "double" => Ok(DType::F64),
            other => Err(Error::config(format!("unknown precision `{other}`"))),
        }
    }
}

/// Floating point element type of a tensor.
pub trait Float:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// Lossy conversion from `f64`.
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from the first `DTYPE.size_of()` bytes.
    fn read_le(bytes: &[u8]) -> Self;

    /// `C = alpha * A B + beta * C` on strided matrices.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping (for `c`)
    /// matrices of the given extents.
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

impl Float for f32 {
    const DTYPE: DType = DType::F32;

    fn of(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Float for f64 {
    const DTYPE: DType = DType::F64;

    fn of(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Whether operations on the current thread record backward rules.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Disables gradient recording on the current thread until the guard drops.
pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

#[must_use = "recording is re-enabled as soon as the guard is dropped"]
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Backward rule: given the gradient of the output and the op inputs, returns
/// one optional gradient per input (same length as the input's data).
pub(crate) type BackwardFn<S> =
    Box<dyn Fn(&[S], &[Tensor<S>]) -> Vec<Option<Vec<S>>> + Send + Sync>;

pub(crate) struct Node<S: Float> {
    pub(crate) op: &'static str,
    pub(crate) inputs: Vec<Tensor<S>>,
    pub(crate) backward: BackwardFn<S>,
}

struct Inner<S: Float> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<S>>>,
    node: Option<Node<S>>,
}

/// Dense n-dimensional array participating in reverse-mode differentiation.
pub struct Tensor<S: Float = f32> {
    inner: Arc<Inner<S>>,
}

impl<S: Float> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<S: Float> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.inner.shape);
        if self.numel() <= 16 {
            d.field("data", &self.inner.data.as_slice());
        }
        d.field("requires_grad", &self.inner.requires_grad);
        if let Some(node) = &self.inner.node {
            d.field("op", &node.op);
        }
        d.finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Float> Tensor<S> {
    fn build(
        shape: Vec<usize>,
        data: Arc<Vec<S>>,
        requires_grad: bool,
        node: Option<Node<S>>,
    ) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                node,
            }),
        }
    }

    /// Creates a constant tensor. Fails when `data.len()` differs from the
    /// product of `shape`.
    pub fn from_vec(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Self::build(shape.to_vec(), Arc::new(data), false, None))
    }

    /// Creates a leaf that accumulates gradients.
    pub fn parameter(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        Ok(Self::from_vec(data, shape)?.requiring_grad())
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(data.iter().map(|&x| S::of(x)).collect(), shape)
    }

    pub fn scalar(value: S) -> Self {
        Self::build(Vec::new(), Arc::new(vec![value]), false, None)
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self::build(shape.to_vec(), Arc::new(vec![value; numel_of(shape)]), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![S::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = S::one();
        }
        Self::build(vec![n, n], Arc::new(data), false, None)
    }

    /// Samples `N(0, std^2)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel_of(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                S::of(z * std)
            })
            .collect();
        Self::build(shape.to_vec(), Arc::new(data), false, None)
    }

    /// Returns a leaf sharing this tensor's data with `requires_grad` set.
    pub fn requiring_grad(&self) -> Self {
        Self::build(self.inner.shape.clone(), Arc::clone(&self.inner.data), true, None)
    }

    /// Returns a constant sharing this tensor's data, cut from any tape.
    pub fn detach(&self) -> Self {
        Self::build(self.inner.shape.clone(), Arc::clone(&self.inner.data), false, None)
    }

    /// Builds the output of an operation. The backward rule is only kept
    /// when recording is enabled and some input requires a gradient.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<S>,
        op: &'static str,
        inputs: Vec<Tensor<S>>,
        backward: BackwardFn<S>,
    ) -> Self {
        Self::from_op_shared(shape, Arc::new(data), op, inputs, backward)
    }

    pub(crate) fn from_op_shared(
        shape: Vec<usize>,
        data: Arc<Vec<S>>,
        op: &'static str,
        inputs: Vec<Tensor<S>>,
        backward: BackwardFn<S>,
    ) -> Self {
        let record = is_grad_enabled() && inputs.iter().any(Tensor::requires_grad);
        if record {
            let node = Node {
                op,
                inputs,
                backward,
            };
            Self::build(shape, data, true, Some(node))
        } else {
            Self::build(shape, data, false, None)
        }
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub(crate) fn node(&self) -> Option<&Node<S>> {
        self.inner.node.as_ref()
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<S>> {
        Arc::clone(&self.inner.data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.inner.data.to_vec()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.iter().map(|x| x.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.numel() != 1 {
            return Err(Error::shape(format!(
                "item() needs one element, tensor has shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Whether this tensor was produced by a recorded operation.
    pub fn is_recorded(&self) -> bool {
        self.inner.node.is_some()
    }

    /// Name of the operation that produced this tensor, if recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.inner.node.as_ref().map(|n| n.op)
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.lock().expect("grad lock").clone()
    }

    pub fn take_grad(&self) -> Option<Vec<S>> {
        self.inner.grad.lock().expect("grad lock").take()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock") = None;
    }

    pub(crate) fn accumulate_grad(&self, g: Vec<S>) {
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g),
        }
    }

    /// Mutable access to the data, available only while no other handle
    /// (including a recorded graph) refers to this tensor or its storage.
    pub fn data_mut(&mut self) -> Result<&mut [S]> {
        let inner = Arc::get_mut(&mut self.inner).ok_or_else(|| {
            Error::Autograd("tensor is shared; drop the graph before mutating".into())
        })?;
        let data = Arc::get_mut(&mut inner.data).ok_or_else(|| {
            Error::Autograd("tensor storage is shared with another tensor".into())
        })?;
        Ok(data.as_mut_slice())
    }

    pub(crate) fn expect_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if self.shape() != shape {
            return Err(Error::shape(format!(
                "{what}: expected shape {shape:?}, got {:?}",
                self.shape()
            )));
        }
        Ok(())
    }

    /// Extent of the last dimension (1 for scalars).
    pub(crate) fn last_dim(&self) -> usize {
        self.shape().last().copied().unwrap_or(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::<f64>::from_vec(vec![1.0; 5], &[2, 3]).is_err());
        let t = Tensor::<f64>::from_vec(vec![1.0; 6], &[2, 3]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(t.ndim(), 2);
    }

    #[test]
    fn no_grad_scope_suppresses_recording() {
        let x = Tensor::<f64>::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.scale(2.0);
        assert!(y.is_recorded());
        {
            let _g = no_grad();
            let z = x.scale(2.0);
            assert!(!z.is_recorded());
            assert!(!z.requires_grad());
        }
        assert!(is_grad_enabled());
    }

    #[test]
    fn constant_inputs_are_not_recorded() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.scale(3.0);
        assert!(!y.is_recorded());
    }

    #[test]
    fn data_mut_requires_unique_ownership() {
        let mut x = Tensor::<f32>::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.scale(2.0);
        assert!(x.data_mut().is_err());
        drop(y);
        x.data_mut().unwrap()[0] = 5.0;
        assert_eq!(x.data(), &[5.0, 2.0]);
    }

    #[test]
    fn dtype_parses() {
        assert_eq!("f32".parse::<DType>().unwrap(), DType::F32);
        assert_eq!("double".parse::<DType>().unwrap(), DType::F64);
        assert!("bf16".parse::<DType>().is_err());
    }
}
