
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Epsilon inside the RMS and layer normalizations.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Log,
    Softplus,
    Silu,
    Sigmoid,
    Tanh,
}

impl UnaryOp {
    pub(crate) fn name(self) -> &'static str {
        match self {
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Softplus => "softplus",
            UnaryOp::Silu => "silu",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Tanh => "tanh",
        }
    }
}

impl BinaryOp {
    pub(crate) fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }
}

pub(crate) fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Element>(v: T) -> T {
    let limit = T::from_f64(20.0);
    if v > limit {
        v
    } else if v < -limit {
        v.exp()
    } else {
        v.exp().ln_1p()
    }
}

pub(crate) fn apply_unary<T: Element>(op: UnaryOp, v: T) -> T {
    match op {
        UnaryOp::Exp => v.exp(),
        UnaryOp::Log => v.ln(),
        UnaryOp::Softplus => softplus(v),
        UnaryOp::Silu => v * sigmoid(v),
        UnaryOp::Sigmoid => sigmoid(v),
        UnaryOp::Tanh => v.tanh(),
    }
}

/// Derivative of a unary op given its input `x` and output `y`.
pub(crate) fn unary_derivative<T: Element>(op: UnaryOp, x: T, y: T) -> T {
    match op {
        UnaryOp::Exp => y,
        UnaryOp::Log => T::one() / x,
        UnaryOp::Softplus => sigmoid(x),
        UnaryOp::Silu => {
            let s = sigmoid(x);
            s * (T::one() + x * (T::one() - s))
        }
        UnaryOp::Sigmoid => y * (T::one() - y),
        UnaryOp::Tanh => T::one() - y * y,
    }
}

/// How the operands of a binary op line up. Broadcasting is restricted to
/// one operand being a scalar or a trailing suffix of the other's shape, so
/// the smaller operand is always indexed by `i % small_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    RhsRepeats(usize),
    LhsRepeats(usize),
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

pub(crate) fn broadcast(a: &[usize], b: &[usize]) -> Result<(Broadcast, Vec<usize>)> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        Ok((Broadcast::Same, a.to_vec()))
    } else if nb == 1 || (nb <= na && is_suffix(b, a)) {
        Ok((Broadcast::RhsRepeats(nb), a.to_vec()))
    } else if na == 1 || (na <= nb && is_suffix(a, b)) {
        Ok((Broadcast::LhsRepeats(na), b.to_vec()))
    } else {
        Err(Error::mismatch("broadcast", a, b))
    }
}

/// Sum a full-size gradient down to a repeating operand of length `m`.
pub(crate) fn reduce_repeats<T: Element>(g: &[T], m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m];
    for chunk in g.chunks(m) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = *o + v;
        }
    }
    out
}

/// Per-row statistics kept by the normalizations for their backward rules.
pub(crate) struct NormStats<T> {
    pub mean: Vec<T>,
    pub inv_scale: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.dims2()?;
        let (k2, n) = rhs.dims2()?;
        if k != k2 {
            return Err(Error::mismatch("matmul", self.shape(), rhs.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.data(),
            (k as isize, 1),
            rhs.data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
        );
        Tensor::from_parts(vec![m, n], out).ensure_finite("matmul")
    }

    pub fn binary(&self, op: BinaryOp, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (mode, shape) = broadcast(self.shape(), rhs.shape())?;
        if op == BinaryOp::Div && rhs.data().iter().any(|v| v.is_zero()) {
            return Err(Error::DivisionByZero);
        }
        let f = |x: T, y: T| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        let a = self.data();
        let b = rhs.data();
        let data: Vec<T> = match mode {
            Broadcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::RhsRepeats(m) => a
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b[i % m]))
                .collect(),
            Broadcast::LhsRepeats(m) => b
                .iter()
                .enumerate()
                .map(|(i, &y)| f(a[i % m], y))
                .collect(),
        };
        Tensor::from_parts(shape, data).ensure_finite(op.name())
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryOp::Add, rhs)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryOp::Sub, rhs)
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryOp::Mul, rhs)
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryOp::Div, rhs)
    }

    pub fn unary(&self, op: UnaryOp) -> Result<Tensor<T>> {
        let data = self.data().iter().map(|&v| apply_unary(op, v)).collect();
        Tensor::from_parts(self.shape().to_vec(), data).ensure_finite(op.name())
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        self.unary(UnaryOp::Exp)
    }

    pub fn log(&self) -> Result<Tensor<T>> {
        self.unary(UnaryOp::Log)
    }

    pub fn softplus(&self) -> Result<Tensor<T>> {
        self.unary(UnaryOp::Softplus)
    }

    pub fn silu(&self) -> Result<Tensor<T>> {
        self.unary(UnaryOp::Silu)
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn tanh(&self) -> Result<Tensor<T>> {
        self.unary(UnaryOp::Tanh)
    }

    pub fn scale(&self, c: T) -> Result<Tensor<T>> {
        let data = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_parts(self.shape().to_vec(), data).ensure_finite("scale")
    }

    /// Split the shape around `axis` into (outer, extent, inner).
    fn axis_split(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.rank() {
            return Err(Error::InvalidArgument(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        let outer = self.shape()[..axis].iter().product();
        let inner = self.shape()[axis + 1..].iter().product();
        Ok((outer, self.shape()[axis], inner))
    }

    /// Numerically stable softmax along `axis` (max subtracted per slice).
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let (outer, n, inner) = self.axis_split(axis)?;
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).fold(T::neg_infinity(), |m, j| m.max(x[idx(j)]));
                let mut total = T::zero();
                for j in 0..n {
                    let e = (x[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total = total + e;
                }
                for j in 0..n {
                    out[idx(j)] = out[idx(j)] / total;
                }
            }
        }
        Tensor::from_parts(self.shape().to_vec(), out).ensure_finite("softmax")
    }

    pub(crate) fn softmax_backward(y: &Tensor<T>, g: &[T], axis: usize) -> Result<Vec<T>> {
        let (outer, n, inner) = y.axis_split(axis)?;
        let yd = y.data();
        let mut dx = vec![T::zero(); yd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let dot = (0..n).fold(T::zero(), |acc, j| acc + g[idx(j)] * yd[idx(j)]);
                for j in 0..n {
                    dx[idx(j)] = yd[idx(j)] * (g[idx(j)] - dot);
                }
            }
        }
        Ok(dx)
    }

    pub fn rms_norm(&self, gain: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.rms_norm_with_stats(gain)?.0)
    }

    pub(crate) fn rms_norm_with_stats(&self, gain: &Tensor<T>) -> Result<(Tensor<T>, NormStats<T>)> {
        let (rows, d) = self.dims2()?;
        if gain.shape() != [d] {
            return Err(Error::mismatch("rms_norm", self.shape(), gain.shape()));
        }
        let eps = T::from_f64(NORM_EPS);
        let dn = T::from_f64(d as f64);
        let g = gain.data();
        let mut out = Vec::with_capacity(rows * d);
        let mut inv = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = self.row(r);
            let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / dn;
            let s = T::one() / (ms + eps).sqrt();
            inv.push(s);
            out.extend(row.iter().zip(g).map(|(&v, &w)| v * s * w));
        }
        let stats = NormStats {
            mean: vec![T::zero(); rows],
            inv_scale: inv,
        };
        Ok((
            Tensor::from_parts(vec![rows, d], out).ensure_finite("rms_norm")?,
            stats,
        ))
    }

    pub fn layer_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.layer_norm_with_stats(gain, bias)?.0)
    }

    pub(crate) fn layer_norm_with_stats(
        &self,
        gain: &Tensor<T>,
        bias: &Tensor<T>,
    ) -> Result<(Tensor<T>, NormStats<T>)> {
        let (rows, d) = self.dims2()?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::mismatch("layer_norm", self.shape(), gain.shape()));
        }
        let eps = T::from_f64(NORM_EPS);
        let dn = T::from_f64(d as f64);
        let (g, b) = (gain.data(), bias.data());
        let mut out = Vec::with_capacity(rows * d);
        let mut means = Vec::with_capacity(rows);
        let mut inv = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = self.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / dn;
            let s = T::one() / (var + eps).sqrt();
            means.push(mean);
            inv.push(s);
            for j in 0..d {
                out.push((row[j] - mean) * s * g[j] + b[j]);
            }
        }
        let stats = NormStats {
            mean: means,
            inv_scale: inv,
        };
        Ok((
            Tensor::from_parts(vec![rows, d], out).ensure_finite("layer_norm")?,
            stats,
        ))
    }

    /// Causal per-channel convolution over the rows of an `L×E` tensor with a
    /// `E×K` kernel: `out[t, e] = Σ_k kernel[e, k] · x[t − K + 1 + k, e] + bias[e]`,
    /// zero-padded on the left.
    pub fn depthwise_conv1d(&self, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (len, e) = self.dims2()?;
        let (ke, k) = kernel.dims2()?;
        if ke != e || bias.shape() != [e] {
            return Err(Error::mismatch("depthwise_conv1d", self.shape(), kernel.shape()));
        }
        let x = self.data();
        let w = kernel.data();
        let mut out = Vec::with_capacity(len * e);
        for t in 0..len {
            out.extend_from_slice(bias.data());
            let row = &mut out[t * e..(t + 1) * e];
            for tap in 0..k {
                // Source row t - (K - 1) + tap; skip the zero padding.
                let Some(src) = (t + tap).checked_sub(k - 1) else {
                    continue;
                };
                let xs = &x[src * e..(src + 1) * e];
                for c in 0..e {
                    row[c] = row[c] + w[c * k + tap] * xs[c];
                }
            }
        }
        Tensor::from_parts(vec![len, e], out).ensure_finite("depthwise_conv1d")
    }

    /// Reverse the order of rows (axis 0).
    pub fn reverse_rows(&self) -> Tensor<T> {
        let (rows, w) = self.rows_and_width();
        let mut data = Vec::with_capacity(self.numel());
        for r in (0..rows).rev() {
            data.extend_from_slice(&self.data()[r * w..(r + 1) * w]);
        }
        Tensor::from_parts(self.shape().to_vec(), data)
    }

    pub fn concat_rows(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let tail = &first.shape()[1..];
        let mut rows = 0;
        for p in parts {
            if &p.shape()[1..] != tail {
                return Err(Error::mismatch("concat_rows", first.shape(), p.shape()));
            }
            rows += p.shape()[0];
        }
        let mut shape = first.shape().to_vec();
        shape[0] = rows;
        let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn concat_cols(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let (rows, _) = first.dims2()?;
        let mut cols = 0;
        for p in parts {
            let (r, c) = p.dims2()?;
            if r != rows {
                return Err(Error::mismatch("concat_cols", first.shape(), p.shape()));
            }
            cols += c;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Tensor::from_parts(vec![rows, cols], data))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let (rows, cols) = self.dims2()?;
        if len == 0 || start + len > cols {
            return Err(Error::InvalidArgument(format!(
                "column slice {start}..{} out of range for {cols} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.row(r)[start..start + len]);
        }
        Ok(Tensor::from_parts(vec![rows, len], data))
    }

    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (rows, cols) = self.dims2()?;
        let x = self.data();
        let mut data = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = x[r * cols + c];
            }
        }
        Ok(Tensor::from_parts(vec![cols, rows], data))
    }

    /// Gather rows (axis 0) by index.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Tensor<T>> {
        let (rows, w) = self.rows_and_width();
        if index.is_empty() {
            return Err(Error::InvalidArgument("gather of zero rows".into()));
        }
        let mut data = Vec::with_capacity(index.len() * w);
        for &i in index {
            if i >= rows {
                return Err(Error::InvalidArgument(format!(
                    "row {i} out of range for {rows} rows"
                )));
            }
            data.extend_from_slice(&self.data()[i * w..(i + 1) * w]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = index.len();
        Ok(Tensor::from_parts(shape, data))
    }

    /// Copy of `self` with the rows at `index` replaced by the rows of `values`.
    pub fn scatter_rows(&self, index: &[usize], values: &Tensor<T>) -> Result<Tensor<T>> {
        let (rows, w) = self.rows_and_width();
        if values.shape()[0] != index.len() || values.shape()[1..] != self.shape()[1..] {
            return Err(Error::mismatch("scatter_rows", self.shape(), values.shape()));
        }
        let mut data = self.data().to_vec();
        for (j, &i) in index.iter().enumerate() {
            if i >= rows {
                return Err(Error::InvalidArgument(format!(
                    "row {i} out of range for {rows} rows"
                )));
            }
            data[i * w..(i + 1) * w].copy_from_slice(&values.data()[j * w..(j + 1) * w]);
        }
        Ok(Tensor::from_parts(self.shape().to_vec(), data))
    }
}
