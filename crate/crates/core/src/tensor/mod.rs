//! Dense row-major tensors.
//!
//! A [`Tensor`] is a plain value: a shape and a contiguous buffer. Gradient
//! tracking lives on the [`crate::autograd::Tape`], which records operations
//! over shared tensor values.

pub(crate) mod kernels;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("shape {shape:?} holds {expected} elements but {got} were given")]
    DataLength { shape: Vec<usize>, expected: usize, got: usize },
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank { op: &'static str, expected: usize, shape: Vec<usize> },
    #[error("softmax needs at least one axis")]
    EmptyAxes,
    #[error("axis {0} listed twice")]
    DuplicateAxis(usize),
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: output extent would be non-positive (input {input:?})")]
    NonPositiveExtent { op: &'static str, input: Vec<usize> },
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(TensorError::ZeroExtent(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected = check_shape(shape)?;
        if expected != data.len() {
            return Err(TensorError::DataLength { shape: shape.to_vec(), expected, got: data.len() });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Like [`Tensor::new`] for shapes the caller has already validated.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(!shape.contains(&0));
        Self { shape, data }
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self::from_parts(shape.to_vec(), vec![value; n]))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect()))
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Result<Self> {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(z * std)
        })
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Result<Self> {
        Self::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(lo..hi)))
    }

    /// Identity matrix `n×n`.
    pub fn eye(n: usize) -> Result<Self> {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Extent of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn get(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank(), "index rank");
        let off = index
            .iter()
            .zip(self.strides())
            .zip(&self.shape)
            .map(|((&i, s), &e)| {
                assert!(i < e, "index {i} out of range for extent {e}");
                i * s
            })
            .sum::<usize>();
        self.data[off]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(TensorError::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.len() {
            return Err(TensorError::ShapeMismatch { op: "reshape", left: self.shape.clone(), right: shape.to_vec() });
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Self::from_parts(self.shape.clone(), self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect()))
    }

    pub fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch { op, left: self.shape.clone(), right: other.shape.clone() });
        }
        Ok(())
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Largest elementwise absolute difference; panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data.iter().zip(&other.data).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts the element type through `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect())
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k, n) = matmul_dims(self.shape(), rhs.shape())?;
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), &self.data, k, 1, &rhs.data, n, 1, T::zero(), &mut out, n, 1);
        Ok(Self::from_parts(vec![m, n], out))
    }

    pub fn transpose2d(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(TensorError::Rank { op: "transpose", expected: 2, shape: self.shape.clone() });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(TensorError::ShapeMismatch { op: "matmul", left: a.to_vec(), right: b.to_vec() });
    }
    Ok((a[0], a[1], b[1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matmul_identity_hand_and_zero() {
        let b = Tensor::<f64>::from_fn(&[3, 5], |i| i as f64 * 0.5 - 2.0).unwrap();
        assert_eq!(Tensor::eye(3).unwrap().matmul(&b).unwrap(), b);

        let a = Tensor::<f64>::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap();
        let v = Tensor::from_f64(&[2, 1], &[1., 1.]).unwrap();
        assert_eq!(a.matmul(&v).unwrap().data(), &[3.0, 7.0]);

        let z = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        let r = Tensor::from_fn(&[3, 4], |i| (i as f64).sin()).unwrap();
        assert_eq!(z.matmul(&r).unwrap(), Tensor::zeros(&[2, 4]).unwrap());
    }

    #[test]
    fn matmul_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        let b = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] and [2, 3]"), "{msg}");
    }

    #[test]
    fn construction_checks() {
        assert!(matches!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]), Err(TensorError::DataLength { .. })));
        assert!(matches!(Tensor::<f32>::zeros(&[2, 0]), Err(TensorError::ZeroExtent(_))));
        let s = Tensor::scalar(2.5f32);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.item().unwrap(), 2.5);
    }

    #[test]
    fn row_major_layout() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64).unwrap();
        assert_eq!(t.strides(), vec![12, 4, 1]);
        assert_eq!(t.get(&[1, 2, 3]), 23.0);
    }

    proptest! {
        #[test]
        fn transpose_is_involution(r in 1usize..6, c in 1usize..6, seed in 0u64..1000) {
            let t = Tensor::<f64>::from_fn(&[r, c], |i| ((i as u64 * 31 + seed) % 17) as f64).unwrap();
            prop_assert_eq!(t.transpose2d().unwrap().transpose2d().unwrap(), t);
        }
    }
}
