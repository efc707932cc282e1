//! Per-pixel class probability fields.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// An H x W x |C| tensor where each pixel holds a probability vector over
/// the class set: entries are non-negative and sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxField {
    probs: Tensor,
}

impl SoftmaxField {
    /// Validates simplex structure per pixel (non-negative, sums to 1 within
    /// 1e-9) before wrapping.
    pub fn new(probs: Tensor) -> Result<SoftmaxField> {
        if probs.rank() != 3 || probs.shape()[2] < 2 {
            return Err(CoreError::InvalidArgument(format!(
                "softmax field needs shape HxWx|C| with |C| >= 2, got {:?}",
                probs.shape()
            )));
        }
        let classes = probs.shape()[2];
        for pixel in probs.data().chunks_exact(classes) {
            let sum: f64 = pixel.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || pixel.iter().any(|&p| p < 0.0) {
                return Err(CoreError::Numeric(format!(
                    "pixel distribution {pixel:?} is not on the simplex"
                )));
            }
        }
        Ok(SoftmaxField { probs })
    }

    /// Wraps a tensor that is already known to hold per-pixel simplexes
    /// (output of the softmax kernel).
    pub(crate) fn from_tensor_unchecked(probs: Tensor) -> SoftmaxField {
        debug_assert_eq!(probs.rank(), 3);
        SoftmaxField { probs }
    }

    pub fn height(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn class_count(&self) -> usize {
        self.probs.shape()[2]
    }

    pub fn pixel_count(&self) -> usize {
        self.height() * self.width()
    }

    /// Probability vector of one pixel.
    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let c = self.class_count();
        let start = (row * self.width() + col) * c;
        &self.probs.data()[start..start + c]
    }

    /// Iterates pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.data().chunks_exact(self.class_count())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.probs
    }

    pub fn into_tensor(self) -> Tensor {
        self.probs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_simplex() {
        let good = Tensor::from_vec(&[1, 1, 2], vec![0.25, 0.75]).unwrap();
        assert!(SoftmaxField::new(good).is_ok());
        let bad_sum = Tensor::from_vec(&[1, 1, 2], vec![0.3, 0.3]).unwrap();
        assert!(SoftmaxField::new(bad_sum).is_err());
        let negative = Tensor::from_vec(&[1, 1, 2], vec![-0.1, 1.1]).unwrap();
        assert!(SoftmaxField::new(negative).is_err());
        let single_class = Tensor::from_vec(&[1, 1, 1], vec![1.0]).unwrap();
        assert!(SoftmaxField::new(single_class).is_err());
    }

    #[test]
    fn pixel_access() {
        let t = Tensor::from_vec(&[1, 2, 2], vec![0.2, 0.8, 0.6, 0.4]).unwrap();
        let field = SoftmaxField::new(t).unwrap();
        assert_eq!(field.pixel(0, 0), &[0.2, 0.8]);
        assert_eq!(field.pixel(0, 1), &[0.6, 0.4]);
        assert_eq!(field.pixels().count(), 2);
    }
}
