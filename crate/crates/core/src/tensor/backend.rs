use std::cell::Cell;
use std::ops::Deref;
use std::rc::Rc;

use super::{BinaryOp, Element, Tensor, UnaryOp};
use crate::error::{Error, Result};
use crate::ssm::{self, Discretization, ScanMode};

/// The operation set every model computation is written against. [`Eager`]
/// evaluates immediately; [`super::Graph`] also records for backward.
pub trait TensorOps<T: Element> {
    type Value;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T>;

    /// Bring an external tensor into the computation. `trainable` marks it as
    /// a leaf whose gradient is wanted.
    fn input(&mut self, t: &Tensor<T>, trainable: bool) -> Self::Value;

    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn binary(&mut self, op: BinaryOp, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn unary(&mut self, op: UnaryOp, a: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, a: &Self::Value, c: T) -> Result<Self::Value>;
    fn softmax(&mut self, a: &Self::Value, axis: usize) -> Result<Self::Value>;
    fn rms_norm(&mut self, x: &Self::Value, gain: &Self::Value) -> Result<Self::Value>;
    fn layer_norm(
        &mut self,
        x: &Self::Value,
        gain: &Self::Value,
        bias: &Self::Value,
    ) -> Result<Self::Value>;
    fn depthwise_conv1d(
        &mut self,
        x: &Self::Value,
        kernel: &Self::Value,
        bias: &Self::Value,
    ) -> Result<Self::Value>;
    fn reverse_rows(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn concat_rows(&mut self, parts: &[&Self::Value]) -> Result<Self::Value>;
    fn concat_cols(&mut self, parts: &[&Self::Value]) -> Result<Self::Value>;
    fn slice_cols(&mut self, x: &Self::Value, start: usize, len: usize) -> Result<Self::Value>;
    fn select_row(&mut self, x: &Self::Value, row: usize) -> Result<Self::Value>;
    /// Rows of `x` in the order given by `index`.
    fn gather_rows(&mut self, x: &Self::Value, index: &[usize]) -> Result<Self::Value>;
    fn transpose(&mut self, x: &Self::Value) -> Result<Self::Value>;

    /// `(Ā, B̄·x')`, both `L×E×N`, from `delta: L×E`, `A: E×N`, `B: L×N`,
    /// `x': L×E`.
    fn discretize(
        &mut self,
        delta: &Self::Value,
        a: &Self::Value,
        b: &Self::Value,
        x_prime: &Self::Value,
        rule: Discretization,
    ) -> Result<(Self::Value, Self::Value)>;

    /// Run the diagonal recurrence over `L` and read out with `C: L×N`,
    /// giving `L×E`.
    fn selective_scan(
        &mut self,
        a_bar: &Self::Value,
        b_bar_x: &Self::Value,
        c: &Self::Value,
        mode: ScanMode,
    ) -> Result<Self::Value>;

    /// Binary cross-entropy of a `1×1` logit against a 0/1 target.
    fn bce_with_logits(&mut self, logit: &Self::Value, target: T) -> Result<Self::Value>;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.binary(BinaryOp::Add, a, b)
    }

    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.binary(BinaryOp::Sub, a, b)
    }

    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.binary(BinaryOp::Mul, a, b)
    }

    fn div(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.binary(BinaryOp::Div, a, b)
    }

    fn exp(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.unary(UnaryOp::Exp, a)
    }

    fn silu(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.unary(UnaryOp::Silu, a)
    }

    fn softplus(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.unary(UnaryOp::Softplus, a)
    }

    fn sigmoid(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    fn tanh(&mut self, a: &Self::Value) -> Result<Self::Value> {
        self.unary(UnaryOp::Tanh, a)
    }

    /// `x · w + b` with `b` broadcast over rows.
    fn linear(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        b: &Self::Value,
    ) -> Result<Self::Value> {
        let xw = self.matmul(x, w)?;
        self.add(&xw, b)
    }
}

/// Tracks live and peak bytes of intermediate tensors produced by an
/// [`Eager`] evaluator. Inputs brought in with [`TensorOps::input`] are not
/// counted.
#[derive(Debug, Default)]
pub struct MemoryAccountant {
    current: Cell<usize>,
    peak: Cell<usize>,
    allocated: Cell<usize>,
}

impl MemoryAccountant {
    pub fn new() -> Rc<Self> {
        Rc::new(Self::default())
    }

    pub fn alloc(&self, bytes: usize) {
        let now = self.current.get() + bytes;
        self.current.set(now);
        self.allocated.set(self.allocated.get() + bytes);
        if now > self.peak.get() {
            self.peak.set(now);
        }
    }

    pub fn free(&self, bytes: usize) {
        self.current.set(self.current.get() - bytes);
    }

    /// Bytes currently held by live intermediates.
    pub fn current(&self) -> usize {
        self.current.get()
    }

    /// Largest number of bytes simultaneously live.
    pub fn peak(&self) -> usize {
        self.peak.get()
    }

    /// Sum of every allocation ever made.
    pub fn total_allocated(&self) -> usize {
        self.allocated.get()
    }
}

/// A tensor produced by [`Eager`]; releases its bytes from the accountant on
/// drop.
pub struct Live<T: Element> {
    tensor: Tensor<T>,
    accountant: Option<Rc<MemoryAccountant>>,
}

impl<T: Element> Live<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(mut self) -> Tensor<T> {
        if let Some(acct) = self.accountant.take() {
            acct.free(self.tensor.size_bytes());
        }
        std::mem::replace(&mut self.tensor, Tensor::scalar(T::zero()))
    }
}

impl<T: Element> Deref for Live<T> {
    type Target = Tensor<T>;

    fn deref(&self) -> &Tensor<T> {
        &self.tensor
    }
}

impl<T: Element> Drop for Live<T> {
    fn drop(&mut self) {
        if let Some(acct) = &self.accountant {
            acct.free(self.tensor.size_bytes());
        }
    }
}

impl<T: Element> std::fmt::Debug for Live<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.tensor.fmt(f)
    }
}

/// Immediate evaluation with optional activation accounting.
#[derive(Clone, Default)]
pub struct Eager {
    accountant: Option<Rc<MemoryAccountant>>,
}

impl Eager {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_accountant(accountant: Rc<MemoryAccountant>) -> Self {
        Eager {
            accountant: Some(accountant),
        }
    }

    fn live<T: Element>(&self, tensor: Tensor<T>) -> Live<T> {
        if let Some(acct) = &self.accountant {
            acct.alloc(tensor.size_bytes());
        }
        Live {
            tensor,
            accountant: self.accountant.clone(),
        }
    }

    fn wrap<T: Element>(&self, r: Result<Tensor<T>>) -> Result<Live<T>> {
        r.map(|t| self.live(t))
    }

    /// Charge kernel-internal scratch space for the duration of `f`.
    fn with_scratch<R>(&self, bytes: usize, f: impl FnOnce() -> R) -> R {
        if let Some(acct) = &self.accountant {
            acct.alloc(bytes);
        }
        let out = f();
        if let Some(acct) = &self.accountant {
            acct.free(bytes);
        }
        out
    }
}

impl<T: Element> TensorOps<T> for Eager {
    type Value = Live<T>;

    fn value<'a>(&'a self, v: &'a Live<T>) -> &'a Tensor<T> {
        &v.tensor
    }

    fn input(&mut self, t: &Tensor<T>, _trainable: bool) -> Live<T> {
        Live {
            tensor: t.clone(),
            accountant: None,
        }
    }

    fn matmul(&mut self, a: &Live<T>, b: &Live<T>) -> Result<Live<T>> {
        self.wrap(a.matmul(b))
    }

    fn binary(&mut self, op: BinaryOp, a: &Live<T>, b: &Live<T>) -> Result<Live<T>> {
        self.wrap(a.binary(op, b))
    }

    fn unary(&mut self, op: UnaryOp, a: &Live<T>) -> Result<Live<T>> {
        self.wrap(a.unary(op))
    }

    fn scale(&mut self, a: &Live<T>, c: T) -> Result<Live<T>> {
        self.wrap(a.scale(c))
    }

    fn softmax(&mut self, a: &Live<T>, axis: usize) -> Result<Live<T>> {
        self.wrap(a.softmax(axis))
    }

    fn rms_norm(&mut self, x: &Live<T>, gain: &Live<T>) -> Result<Live<T>> {
        self.wrap(x.rms_norm(gain))
    }

    fn layer_norm(&mut self, x: &Live<T>, gain: &Live<T>, bias: &Live<T>) -> Result<Live<T>> {
        self.wrap(x.layer_norm(gain, bias))
    }

    fn depthwise_conv1d(
        &mut self,
        x: &Live<T>,
        kernel: &Live<T>,
        bias: &Live<T>,
    ) -> Result<Live<T>> {
        self.wrap(x.depthwise_conv1d(kernel, bias))
    }

    fn reverse_rows(&mut self, x: &Live<T>) -> Result<Live<T>> {
        Ok(self.live(x.reverse_rows()))
    }

    fn concat_rows(&mut self, parts: &[&Live<T>]) -> Result<Live<T>> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|p| p.tensor()).collect();
        self.wrap(Tensor::concat_rows(&tensors))
    }

    fn concat_cols(&mut self, parts: &[&Live<T>]) -> Result<Live<T>> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|p| p.tensor()).collect();
        self.wrap(Tensor::concat_cols(&tensors))
    }

    fn slice_cols(&mut self, x: &Live<T>, start: usize, len: usize) -> Result<Live<T>> {
        self.wrap(x.slice_cols(start, len))
    }

    fn select_row(&mut self, x: &Live<T>, row: usize) -> Result<Live<T>> {
        self.wrap(x.gather_rows(&[row]))
    }

    fn gather_rows(&mut self, x: &Live<T>, index: &[usize]) -> Result<Live<T>> {
        self.wrap(x.gather_rows(index))
    }

    fn transpose(&mut self, x: &Live<T>) -> Result<Live<T>> {
        self.wrap(x.transpose())
    }

    fn discretize(
        &mut self,
        delta: &Live<T>,
        a: &Live<T>,
        b: &Live<T>,
        x_prime: &Live<T>,
        rule: Discretization,
    ) -> Result<(Live<T>, Live<T>)> {
        let a_bar = ssm::discretize_state(delta, a, rule)?;
        let a_bar = self.live(a_bar);
        let bx = self.live(ssm::discretize_input(delta, b, x_prime)?);
        Ok((a_bar, bx))
    }

    fn selective_scan(
        &mut self,
        a_bar: &Live<T>,
        b_bar_x: &Live<T>,
        c: &Live<T>,
        mode: ScanMode,
    ) -> Result<Live<T>> {
        let dims = ssm::scan_dims(a_bar, b_bar_x, c)?;
        let (len, e, n) = dims;
        let elem = std::mem::size_of::<T>();
        let y = match mode {
            // Only the running E×N state is held.
            ScanMode::Sequential => self.with_scratch(e * n * elem, || {
                ssm::scan_sequential_streaming(a_bar.data(), b_bar_x.data(), c.data(), dims)
            }),
            // The up/down sweeps work on copies of both coefficient tensors.
            ScanMode::Parallel => self.with_scratch(2 * len * e * n * elem, || {
                let h = ssm::scan_parallel_states(a_bar.data(), b_bar_x.data(), len, e * n);
                ssm::readout(&h, c.data(), dims)
            }),
        };
        self.wrap(Tensor::from_parts(vec![len, e], y).ensure_finite("selective_scan"))
    }

    fn bce_with_logits(&mut self, logit: &Live<T>, target: T) -> Result<Live<T>> {
        self.wrap(bce_value(logit, target))
    }
}

pub(crate) fn bce_value<T: Element>(logit: &Tensor<T>, target: T) -> Result<Tensor<T>> {
    if logit.numel() != 1 {
        return Err(Error::mismatch("bce_with_logits", logit.shape(), &[1, 1]));
    }
    let z = logit.data()[0];
    // max(z, 0) - z·y + log(1 + e^{-|z|})
    let loss = z.max(T::zero()) - z * target + (-z.abs()).exp().ln_1p();
    Tensor::from_parts(vec![1], vec![loss]).ensure_finite("bce_with_logits")
}
