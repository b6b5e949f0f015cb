//! Dense row-major tensor values.
//!
//! A [`Tensor`] is a plain value: a shape and a contiguous `f64` buffer.
//! Gradient bookkeeping lives on the [`Tape`](crate::autodiff::Tape), which
//! owns one tensor per recorded node.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// Numeric element type used throughout the crate.
pub type Scalar = f64;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Scalar>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` has positive extents and matches `data`.
    pub fn new(shape: &[usize], data: Vec<Scalar>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid_shape(shape, "extents must be positive"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid_shape(
                shape,
                format!("expects {numel} elements, buffer has {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: Scalar) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn full(shape: &[usize], value: Scalar) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("full: invalid shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// Uniform samples in `[low, high)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], low: Scalar, high: Scalar, rng: &mut R) -> Self {
        let dist = Uniform::new(low, high).expect("uniform: empty range");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| dist.sample(rng)).collect();
        Self::new(shape, data).expect("uniform: invalid shape")
    }

    /// Zero-mean normal samples with standard deviation `std`.
    pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: Scalar, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("normal: invalid std");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| dist.sample(rng)).collect();
        Self::new(shape, data).expect("normal: invalid shape")
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

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Scalar] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Scalar> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<Scalar> {
        if self.data.len() != 1 {
            return Err(Error::invalid_shape(&self.shape, "item() needs exactly one element"));
        }
        Ok(self.data[0])
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Extents of a `C×H×W` tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::invalid_shape(&self.shape, "expected C×H×W")),
        }
    }

    pub fn get(&self, index: &[usize]) -> Scalar {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: Scalar) {
        let at = self.offset(index);
        self.data[at] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {i} out of bounds for extent {d}");
                acc * d + i
            })
    }

    pub fn map(&self, f: impl Fn(Scalar) -> Scalar) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Scalar {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Scalar::max)
    }

    pub fn sum(&self) -> Scalar {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> Scalar {
        self.sum() / self.data.len() as Scalar
    }
}
