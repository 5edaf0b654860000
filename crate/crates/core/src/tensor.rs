//! Dense row-major `f64` tensors.
//!
//! Deliberately minimal: the miniature LM only needs vectors, matrices and a
//! scalar, all in 64-bit. Checkpoints quantize to 32-bit on disk; in memory
//! everything stays `f64`.

use serde::{Deserialize, Serialize};

use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("dims {dims:?} imply {expected} elements, got {got}")]
    LengthMismatch {
        dims: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("dims must all be positive, got {0:?}")]
    ZeroDim(Vec<usize>),
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if dims.contains(&0) {
            return Err(TensorError::ZeroDim(dims));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                expected,
                got: data.len(),
                dims,
            });
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            dims: vec![data.len()],
            data,
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(dims: &[usize], std: f64, rng: &mut SeededRng) -> Self {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Scalar payload; panics if the tensor is not a single element.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of dims {:?}", self.dims);
        self.data[0]
    }

    /// Rows of a 2-D tensor (a vector counts as one row).
    pub fn rows(&self) -> usize {
        match self.dims.len() {
            1 => 1,
            2 => self.dims[0],
            _ => panic!("rows() on rank-{} tensor", self.dims.len()),
        }
    }

    /// Columns of a 1-D or 2-D tensor.
    pub fn cols(&self) -> usize {
        match self.dims.len() {
            1 => self.dims[0],
            2 => self.dims[1],
            _ => panic!("cols() on rank-{} tensor", self.dims.len()),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Index of the first non-finite entry, if any.
    pub fn first_nonfinite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Euclidean norm of the flattened data.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self += scale * other`; dims must match exactly.
    pub fn axpy(&mut self, scale: f64, other: &Tensor) {
        assert_eq!(self.dims, other.dims, "axpy dims mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::LengthMismatch { .. }));
        assert!(matches!(
            Tensor::new(vec![0], vec![]).unwrap_err(),
            TensorError::ZeroDim(_)
        ));
    }

    #[test]
    fn axpy_accumulates() {
        let mut a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![10.0, 20.0]);
        a.axpy(0.5, &b);
        assert_eq!(a.data(), &[6.0, 12.0]);
    }

    #[test]
    fn nonfinite_detection() {
        let t = Tensor::vector(vec![1.0, f64::NAN]);
        assert_eq!(t.first_nonfinite(), Some(1));
        assert_eq!(Tensor::vector(vec![1.0]).first_nonfinite(), None);
    }
}
