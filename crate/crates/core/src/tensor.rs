//! Dense row-major tensors.
//!
//! Shapes are dynamic (rank 1 and up); a scalar is represented as shape
//! `[1]`. Zero-length axes are rejected so the numeric kernels never have to
//! reason about empty operands.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorBase<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> TensorBase<S> {
    /// Wraps a data buffer with a shape. The element count must match the
    /// shape product exactly.
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let numel = checked_numel(shape)?;
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor::new",
                detail: format!("shape {:?} wants {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = checked_numel(shape).expect("valid shape");
        Self { shape: shape.to_vec(), data: vec![S::zero(); numel] }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = checked_numel(shape).expect("valid shape");
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    /// Rank-1 single-element tensor; the scalar convention used by losses.
    pub fn scalar(value: S) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// Fills a tensor with i.i.d. uniform draws from `[lo, hi)`. Draws happen
    /// in f64 so f32 and f64 tensors see the same stream.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let numel = checked_numel(shape).expect("valid shape");
        let data = (0..numel).map(|_| S::of(rng.gen_range(lo..hi))).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel = checked_numel(shape)?;
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor::reshape",
                detail: format!("{:?} -> {:?}", self.shape, shape),
            });
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for axis in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * self.shape[axis + 1];
        }
        strides
    }

    pub fn at(&self, index: &[usize]) -> S {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: S) {
        let flat = self.flat_index(index);
        self.data[flat] = value;
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (axis, &i) in index.iter().enumerate() {
            debug_assert!(i < self.shape[axis]);
            flat = flat * self.shape[axis] + i;
        }
        flat
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// True when every element is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of all elements.
    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    /// Maximum absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Self) -> S {
        assert_eq!(self.shape, other.shape, "max_abs_diff wants equal shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), S::max)
    }

    /// Converts element type, widening through f64.
    pub fn cast<T: Scalar>(&self) -> TensorBase<T> {
        TensorBase {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidArgument("tensor rank must be >= 1".into()));
    }
    let mut numel = 1usize;
    for &dim in shape {
        if dim == 0 {
            return Err(Error::InvalidArgument(format!("zero-length axis in shape {:?}", shape)));
        }
        numel = numel
            .checked_mul(dim)
            .ok_or_else(|| Error::InvalidArgument(format!("shape {:?} overflows usize", shape)))?;
    }
    Ok(numel)
}
