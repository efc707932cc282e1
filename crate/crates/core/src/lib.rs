//! Desk-scale toolkit for adversarial attacks on pixel-wise classifiers and
//! their uncertainty-based detection.
//!
//! The pipeline runs end to end on synthetic multi-class scenes: train a
//! small segmentation network, perturb its inputs with a suite of
//! gradient-based attacks, compute pixel-wise uncertainty heatmaps, and fit
//! detectors that classify images as benign or perturbed. Everything is
//! seeded and bit-reproducible.

pub mod attacks;
pub mod autodiff;
pub mod datagen;
pub mod detectors;
pub mod error;
pub mod field;
pub mod labelmap;
pub mod metrics;
pub mod segnet;
pub mod tensor;
pub mod uncertainty;

pub use error::{CoreError, Result};
pub use field::SoftmaxField;
pub use labelmap::LabelMap;
pub use tensor::Tensor;
