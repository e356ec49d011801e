//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Tensors wrap a flat contiguous buffer plus a shape. Every operation that
//! participates in training records its inputs in an acyclic graph; calling
//! [`Tensor::backward`] on a scalar walks that graph in reverse topological
//! order and accumulates gradients into the leaf variables (parameters).
//!
//! Design notes:
//! - Node ids increase monotonically at construction time, so descending id
//!   order is a valid reverse-topological order; no explicit sort key beyond
//!   the id is needed.
//! - Gradients of intermediate nodes live in a scratch map local to one
//!   `backward` call; only leaf variables retain gradients, and repeated
//!   `backward` calls accumulate additively until [`Tensor::zero_grad`].
//! - The element type is generic over [`f32`] and [`f64`] via [`Elem`]; the
//!   64-bit instantiation exists for finite-difference gradient checking.
//! - Graph construction and backprop are single-threaded by design; ops are
//!   pure with respect to their inputs.

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

mod backward;
pub mod gradcheck;
mod op;
pub mod ops;
mod rnn;

pub use gradcheck::{finite_diff_check, GradReport};
pub(crate) use op::Op;

/// Element dtype tag, used by checkpoint serialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Scalar element type for tensors: `f32` for training, `f64` for
/// finite-difference gradient checking.
///
/// The conversion methods avoid the `FromPrimitive`/`ToPrimitive` names,
/// which `num_traits::Float` already drags into scope.
pub trait Elem:
    num_traits::Float + num_traits::NumAssign + fmt::Debug + fmt::Display + Default + 'static
{
    const DTYPE: Dtype;

    fn of_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite f64 conversion")
    }

    fn into_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite element")
    }

    /// `c = alpha * a@b + beta * c` over row-major buffers with explicit
    /// strides. Backed by a blocked SIMD kernel; both orders of each operand
    /// are expressible through the stride arguments.
    ///
    /// # Safety
    /// Pointers must cover `m*k`, `k*n`, `m*n` elements under the strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

impl Elem for f32 {
    const DTYPE: Dtype = Dtype::F32;

    unsafe fn gemm_raw(
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

impl Elem for f64 {
    const DTYPE: Dtype = Dtype::F64;

    unsafe fn gemm_raw(
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

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Disables graph recording for the duration of the guard. Forward passes
/// under the guard skip op bookkeeping and backward caches entirely.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    #[allow(clippy::new_without_default)]
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|c| c.replace(false));
        NoGradGuard { prev }
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        let prev = self.prev;
        GRAD_ENABLED.with(|c| c.set(prev));
    }
}

/// Runs `f` with graph recording disabled.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _guard = NoGradGuard::new();
    f()
}

pub(crate) struct Inner<E: Elem> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    op: Op<E>,
    /// Leaf variable: gradients accumulate here across backward calls.
    var: bool,
}

/// A dense tensor handle. Cloning is cheap (shared buffer).
pub struct Tensor<E: Elem>(pub(crate) Rc<Inner<E>>);

impl<E: Elem> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<E: Elem> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(id={}, shape={:?}", self.0.id, self.0.shape)?;
        if self.numel() <= 8 {
            write!(f, ", data={:?}", &*self.data())?;
        }
        write!(f, ")")
    }
}

impl<E: Elem> Tensor<E> {
    pub(crate) fn make(shape: Vec<usize>, data: Vec<E>, op: Op<E>, var: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Inner {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            op,
            var,
        }))
    }

    /// Wraps `op` output data in a new node, dropping the op record when
    /// recording is off or no parent connects to a variable.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<E>, op: Op<E>) -> Self {
        if grad_enabled() && op.any_parent_connected() {
            Tensor::make(shape, data, op, false)
        } else {
            Tensor::make(shape, data, Op::None, false)
        }
    }

    /// Constant (non-trainable) tensor from a flat buffer.
    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "from_vec",
                msg: format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor::make(shape.to_vec(), data, Op::None, false))
    }

    /// Leaf variable: participates in autodiff and accumulates gradients.
    pub fn var_from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "var_from_vec",
                msg: format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor::make(shape.to_vec(), data, Op::None, true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::make(shape.to_vec(), vec![E::zero(); numel], Op::None, false)
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let numel = shape.iter().product();
        Tensor::make(shape.to_vec(), vec![value; numel], Op::None, false)
    }

    pub fn scalar(value: E) -> Self {
        Tensor::make(vec![1], vec![value], Op::None, false)
    }

    pub fn from_f64_slice(data: &[f64], shape: &[usize]) -> Result<Self> {
        Tensor::from_vec(data.iter().map(|&v| E::of_f64(v)).collect(), shape)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.0.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.borrow().iter().map(|v| v.into_f64()).collect()
    }

    /// Scalar extraction; the tensor must hold exactly one element.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.0.data.borrow()[0]
    }

    pub fn is_var(&self) -> bool {
        self.0.var
    }

    /// True when this node can route gradients to a leaf variable.
    pub(crate) fn connected(&self) -> bool {
        self.0.var || !matches!(self.0.op, Op::None)
    }

    /// Current accumulated gradient of a leaf variable, if any.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[E]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Overwrites the buffer in place (parameter updates). Shape must match.
    pub fn set_data(&self, data: &[E]) {
        let mut d = self.0.data.borrow_mut();
        assert_eq!(d.len(), data.len(), "set_data length mismatch");
        d.copy_from_slice(data);
    }

    /// Mutates the buffer through a closure (in-place optimizer steps).
    pub fn update_data(&self, f: impl FnOnce(&mut [E])) {
        f(&mut self.0.data.borrow_mut());
    }

    /// Overwrites the buffer from `f64` values, converting to the element
    /// type (finite-difference probes share one graph-free code path).
    pub fn set_data_f64(&self, data: &[f64]) {
        let mut d = self.0.data.borrow_mut();
        assert_eq!(d.len(), data.len(), "set_data_f64 length mismatch");
        for (dst, &src) in d.iter_mut().zip(data) {
            *dst = E::of_f64(src);
        }
    }

    /// Detached copy: same values, no graph history, not a variable.
    pub fn detach(&self) -> Self {
        Tensor::make(self.0.shape.clone(), self.to_vec(), Op::None, false)
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// `c[m,n] = alpha * a[m,k] @ b[k,n] + beta * c` on contiguous row-major
/// buffers.
pub(crate) fn gemm<E: Elem>(
    m: usize,
    k: usize,
    n: usize,
    alpha: E,
    a: &[E],
    b: &[E],
    beta: E,
    c: &mut [E],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        E::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m,k] = alpha * g[m,n] @ b^T + beta * c` where `b` is `[k,n]` row-major.
pub(crate) fn gemm_nt<E: Elem>(
    m: usize,
    n: usize,
    k: usize,
    alpha: E,
    g: &[E],
    b: &[E],
    beta: E,
    c: &mut [E],
) {
    debug_assert!(g.len() >= m * n && b.len() >= k * n && c.len() >= m * k);
    if m == 0 || k == 0 {
        return;
    }
    unsafe {
        E::gemm_raw(
            m,
            n,
            k,
            alpha,
            g.as_ptr(),
            n as isize,
            1,
            b.as_ptr(),
            1,
            n as isize,
            beta,
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// `c[k,n] = alpha * a^T @ g + beta * c` where `a` is `[m,k]`, `g` is `[m,n]`.
pub(crate) fn gemm_tn<E: Elem>(
    m: usize,
    k: usize,
    n: usize,
    alpha: E,
    a: &[E],
    g: &[E],
    beta: E,
    c: &mut [E],
) {
    debug_assert!(a.len() >= m * k && g.len() >= m * n && c.len() >= k * n);
    if k == 0 || n == 0 {
        return;
    }
    unsafe {
        E::gemm_raw(
            k,
            m,
            n,
            alpha,
            a.as_ptr(),
            1,
            k as isize,
            g.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
