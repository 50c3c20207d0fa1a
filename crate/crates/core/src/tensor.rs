//! Dense row-major f64 tensors.
//!
//! Deliberately minimal: a shape and a flat buffer. All differentiable
//! arithmetic goes through [`crate::tape::Tape`]; the methods here are
//! construction, access, and shape bookkeeping only.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::TapeError;
use crate::rng::DetRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build from shape and row-major data. The element count must match.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TapeError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TapeError::ShapeMismatch {
                op: "Tensor::new",
                expected: vec![numel],
                actual: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn vector(xs: Vec<f64>) -> Self {
        Tensor {
            shape: vec![xs.len()],
            data: xs,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TapeError> {
        Tensor::new(vec![rows, cols], data)
    }

    /// i.i.d. normal entries scaled by `std`.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut DetRng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.normal() * std).collect();
        Tensor { shape, data }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a 2-d tensor (a vector counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on tensor of rank {}", self.shape.len()),
        }
    }

    /// Columns of a 2-d tensor (or the length of a vector).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let c = self.cols();
        self.data[row * c + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Exact bitwise equality, used by determinism and round-trip tests.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
