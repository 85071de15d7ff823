use super::TapeError;

#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// Dense array of reals in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self, TapeError> {
        let len: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || len != data.len() {
            return Err(TapeError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {:?} does not hold {} values", shape, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor { shape, data: vec![0.0; len] }
    }

    pub fn scalar(x: Real) -> Self {
        Tensor { shape: vec![1], data: vec![x] }
    }

    pub fn vector(data: Vec<Real>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<Real>) -> Result<Self, TapeError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension, or 1 for a flat vector treated as one row.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn at(&self, row: usize, col: usize) -> Real {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, r: usize) -> &[Real] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True when both tensors have the same trailing dimension and `self`
    /// is a flat vector or single row usable as a per-row bias for `other`.
    pub(crate) fn is_bias_for(&self, other: &Tensor) -> bool {
        self.rows() == 1 && self.cols() == other.cols() && self.len() == other.cols()
    }
}
