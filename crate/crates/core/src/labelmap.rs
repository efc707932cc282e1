//! Per-pixel class-id maps.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// A dense H x W grid of class ids. Class ids fit in a `u8`, which caps the
/// label space at 256 classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    ids: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, ids: Vec<u8>) -> Result<LabelMap> {
        if ids.len() != height * width {
            return Err(CoreError::InvalidArgument(format!(
                "label map {height}x{width} wants {} ids, got {}",
                height * width,
                ids.len()
            )));
        }
        Ok(LabelMap { height, width, ids })
    }

    pub fn filled(height: usize, width: usize, id: u8) -> LabelMap {
        LabelMap {
            height,
            width,
            ids: vec![id; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.ids[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, id: u8) {
        self.ids[row * self.width + col] = id;
    }

    /// Checks that every id is below `num_classes`.
    pub fn validate_classes(&self, num_classes: usize) -> Result<()> {
        if let Some(&bad) = self.ids.iter().find(|&&id| (id as usize) >= num_classes) {
            return Err(CoreError::InvalidArgument(format!(
                "label id {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(())
    }

    pub fn class_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut hist = vec![0usize; num_classes];
        for &id in &self.ids {
            if (id as usize) < num_classes {
                hist[id as usize] += 1;
            }
        }
        hist
    }

    /// Fraction of pixels where the two maps disagree.
    pub fn disagreement(&self, other: &LabelMap) -> Result<f64> {
        if self.height != other.height || self.width != other.width {
            return Err(CoreError::shape_mismatch(
                "label map comparison",
                &[self.height, self.width],
                &[other.height, other.width],
            ));
        }
        if self.ids.is_empty() {
            return Err(CoreError::InvalidArgument("empty label map".into()));
        }
        let wrong = self
            .ids
            .iter()
            .zip(&other.ids)
            .filter(|(a, b)| a != b)
            .count();
        Ok(wrong as f64 / self.ids.len() as f64)
    }

    /// Stores the ids as a rank-2 tensor; exact for all `u8` values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[self.height, self.width],
            self.ids.iter().map(|&id| id as f64).collect(),
        )
        .expect("label ids are finite")
    }

    pub fn from_tensor(tensor: &Tensor) -> Result<LabelMap> {
        if tensor.rank() != 2 {
            return Err(CoreError::Format(format!(
                "label tensor must be rank 2, got shape {:?}",
                tensor.shape()
            )));
        }
        let mut ids = Vec::with_capacity(tensor.len());
        for &v in tensor.data() {
            if v < 0.0 || v > 255.0 || v.fract() != 0.0 {
                return Err(CoreError::Format(format!("value {v} is not a class id")));
            }
            ids.push(v as u8);
        }
        LabelMap::new(tensor.shape()[0], tensor.shape()[1], ids)
    }
}
