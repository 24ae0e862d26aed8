//! Dense tensors plus a tape-based reverse-mode autodiff engine.
//!
//! The engine is deliberately small: 2-D (and flat 1-D) row-major tensors,
//! explicit shapes, no broadcasting beyond row-wise bias addition. Precision
//! is a type parameter so the same model code runs in f32 for training and
//! f64 for finite-difference gradient checks.

pub mod gradcheck;
pub mod optim;
pub mod tape;

use num_traits::{Float, NumAssign};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Element type of all tensors. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + NumAssign + Sum + Send + Sync + Debug + Display + 'static
{
    const BITS: u32;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const BITS: u32 = 32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const BITS: u32 = 64;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor. `product(shape) == data.len()` always holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn scalar(x: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn row(data: Vec<F>) -> Self {
        Tensor {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar payload; panics if the tensor has more than one element.
    pub fn item(&self) -> F {
        assert!(self.is_scalar(), "item() on non-scalar shape {:?}", self.shape);
        self.data[0]
    }

    /// Number of rows when viewed as 2-D (1-D tensors count as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn get2(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::from_f64(x.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> F {
        self.data
            .iter()
            .fold(F::zero(), |m, x| if x.abs() > m { x.abs() } else { m })
    }
}

/// Shorthand for converting literals into the active precision.
pub fn s<F: Scalar>(x: f64) -> F {
    F::from_f64(x)
}
