//! Dense row-major tensors with a small set of forward kernels, a
//! reverse-mode gradient graph, and an eager evaluator that can account for
//! activation memory.

mod backend;
mod gradcheck;
mod graph;
mod kernels;

pub use backend::{Eager, Live, MemoryAccountant, TensorOps};
pub use gradcheck::{finite_difference_gradient, relative_error};
pub use graph::{Graph, Var};
pub use kernels::{BinaryOp, UnaryOp, NORM_EPS};
pub(crate) use backend::bce_value;
pub(crate) use kernels::sigmoid;

use std::fmt;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => f.write_str("float32"),
            DType::F64 => f.write_str("float64"),
        }
    }
}

/// Scalar types a [`Tensor`] can hold. The dtype is fixed by the type
/// parameter, so mixing precisions requires an explicit [`Tensor::cast`].
pub trait Element:
    Float + Default + Send + Sync + fmt::Debug + fmt::Display + std::iter::Sum + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = a · b + beta · c` for row-major `a: m×k`, `b: k×n`. Strides are
    /// given in elements so transposed views need no copy.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_element {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Element for $t {
            const DTYPE: DType = $dtype;

            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn to_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    c[..m * n].iter_mut().for_each(|v| *v = *v * beta);
                    return;
                }
                let a_end = (m as isize - 1) * a_strides.0 + (k as isize - 1) * a_strides.1;
                let b_end = (k as isize - 1) * b_strides.0 + (n as isize - 1) * b_strides.1;
                assert!((a_end as usize) < a.len() && (b_end as usize) < b.len());
                // SAFETY: the asserts above bound every strided access inside
                // the three slices, and `c` does not alias `a` or `b`.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, DType::F32, matrixmultiply::sgemm);
impl_element!(f64, DType::F64, matrixmultiply::dgemm);

/// Initialization schemes accepted by [`Tensor::create`].
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Uniform { seed: u64, lo: f64, hi: f64 },
    Normal { seed: u64, mean: f64, std: f64 },
    Values(Vec<f64>),
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("dtype", &T::DTYPE)
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel = validate_shape(shape)?;
        if numel != data.len() {
            return Err(Error::mismatch("tensor data", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Construction used by kernels whose output shape is known to be valid.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn create(shape: &[usize], init: Init) -> Result<Self> {
        let numel = validate_shape(shape)?;
        let data = match init {
            Init::Zeros => vec![T::zero(); numel],
            Init::Ones => vec![T::one(); numel],
            Init::Uniform { seed, lo, hi } => {
                if !(lo < hi) {
                    return Err(Error::InvalidArgument(format!(
                        "uniform bounds must satisfy lo < hi, got [{lo}, {hi})"
                    )));
                }
                let dist = Uniform::new(lo, hi)
                    .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..numel).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
            }
            Init::Normal { seed, mean, std } => {
                let dist =
                    Normal::new(mean, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..numel).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
            }
            Init::Values(values) => {
                if values.len() != numel {
                    return Err(Error::mismatch("tensor data", shape, &[values.len()]));
                }
                values.into_iter().map(T::from_f64).collect()
            }
        };
        Tensor::new(shape, data)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::create(shape, Init::Zeros)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::create(shape, Init::Ones)
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let numel = validate_shape(shape)?;
        Tensor::new(shape, vec![value; numel])
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::create(shape, Init::Values(values.to_vec()))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn size_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<T>()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::mismatch("rank-2 tensor", other, &[0, 0])),
        }
    }

    /// Extent of axis 0 and the number of elements per row.
    pub(crate) fn rows_and_width(&self) -> (usize, usize) {
        let rows = self.shape[0];
        (rows, self.data.len() / rows)
    }

    pub fn get(&self, index: &[usize]) -> Option<T> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return None;
            }
            flat = flat * d + i;
        }
        Some(self.data[flat])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel = validate_shape(shape)?;
        if numel != self.data.len() {
            return Err(Error::mismatch("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(Element::to_f64(*v))).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, v| if v.abs() > acc { v.abs() } else { acc })
    }

    pub fn sample_uniform<R: rand::Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Result<Self> {
        let numel = validate_shape(shape)?;
        let dist = Uniform::new(lo, hi).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Tensor::new(shape, (0..numel).map(|_| T::from_f64(dist.sample(rng))).collect())
    }

    pub fn sample_normal<R: rand::Rng>(shape: &[usize], mean: f64, std: f64, rng: &mut R) -> Result<Self> {
        let numel = validate_shape(shape)?;
        let dist = Normal::new(mean, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Tensor::new(shape, (0..numel).map(|_| T::from_f64(dist.sample(rng))).collect())
    }

    pub fn row(&self, r: usize) -> &[T] {
        let (_, w) = self.rows_and_width();
        &self.data[r * w..(r + 1) * w]
    }
}
