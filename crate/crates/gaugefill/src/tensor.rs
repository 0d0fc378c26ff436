//! Dense row-major f64 tensor value type.
//!
//! Kept deliberately small: shapes the model needs are vectors, matrices and
//! the occasional scalar. All differentiable structure lives on the tape, not
//! here.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor_new",
                format!("shape {:?} wants {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(vec![rows, cols], data)
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

    /// Rows and columns of a 2-D tensor; 1-D tensors are treated as a single
    /// row so bias vectors and matrices share code paths where sensible.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            2 => Ok((self.shape[0], self.shape[1])),
            1 => Ok((1, self.shape[0])),
            _ => Err(Error::shape(
                "dims2",
                format!("expected 1-D or 2-D tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_mismatch_rejected() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn dims2_treats_vectors_as_rows() {
        let v = Tensor::vector(vec![1.0, 2.0, 3.0]);
        assert_eq!(v.dims2().unwrap(), (1, 3));
        let m = Tensor::matrix(2, 2, vec![1.0; 4]).unwrap();
        assert_eq!(m.dims2().unwrap(), (2, 2));
    }
}
