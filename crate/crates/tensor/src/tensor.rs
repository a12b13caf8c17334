use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Owned dense row-major value. Gradient bookkeeping lives on the [`Tape`](crate::Tape).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns of the matrix view (all leading extents folded into rows).
    pub fn matrix_dims(&self) -> (usize, usize) {
        matrix_dims(&self.shape)
    }

    pub fn row(&self, r: usize) -> &[T] {
        let (_, c) = self.matrix_dims();
        &self.data[r * c..(r + 1) * c]
    }
}

pub(crate) fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != len {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            len,
        });
    }
    Ok(())
}

pub(crate) fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / cols.max(1);
    (rows, cols)
}
