//! Pixel-wise uncertainty heatmaps and their image-level aggregation.
//!
//! Three dispersion measures are computed from the per-pixel class
//! distribution: normalized entropy, variation ratio (one minus the top
//! probability), and probability margin (top minus second probability).
//! Image-level features stack the three heatmap means with the per-class
//! mean probabilities, giving |C| + 3 values per image.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::field::SoftmaxField;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapKind {
    Entropy,
    VariationRatio,
    ProbabilityMargin,
}

impl HeatmapKind {
    pub fn name(&self) -> &'static str {
        match self {
            HeatmapKind::Entropy => "entropy",
            HeatmapKind::VariationRatio => "variation_ratio",
            HeatmapKind::ProbabilityMargin => "probability_margin",
        }
    }
}

/// An H x W grid of per-pixel uncertainty values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub kind: HeatmapKind,
    pub values: Tensor,
}

impl Heatmap {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn mean(&self) -> f64 {
        self.values.data().iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Normalized entropy per pixel: -(1/log|C|) sum_y p log p, with
/// 0 log 0 := 0. Values lie in [0, 1].
pub fn entropy_heatmap(probs: &SoftmaxField) -> Heatmap {
    let norm = 1.0 / (probs.class_count() as f64).ln();
    let values: Vec<f64> = probs
        .pixels()
        .map(|pixel| {
            let mut h = 0.0;
            for &p in pixel {
                if p > 0.0 {
                    h -= p * p.ln();
                }
            }
            (h * norm).clamp(0.0, 1.0)
        })
        .collect();
    Heatmap {
        kind: HeatmapKind::Entropy,
        values: Tensor::from_vec(&[probs.height(), probs.width()], values)
            .expect("entropy values are finite"),
    }
}

/// Variation ratio per pixel: 1 - p(argmax). Values lie in [0, 1 - 1/|C|].
pub fn variation_ratio_heatmap(probs: &SoftmaxField) -> Heatmap {
    let values: Vec<f64> = probs
        .pixels()
        .map(|pixel| 1.0 - pixel.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .map(|v| v.max(0.0))
        .collect();
    Heatmap {
        kind: HeatmapKind::VariationRatio,
        values: Tensor::from_vec(&[probs.height(), probs.width()], values)
            .expect("variation ratios are finite"),
    }
}

/// Probability margin per pixel: p(argmax) minus the largest probability of
/// any other class. Values lie in [0, 1].
pub fn probability_margin_heatmap(probs: &SoftmaxField) -> Heatmap {
    let values: Vec<f64> = probs
        .pixels()
        .map(|pixel| {
            let mut top = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            for &p in pixel {
                if p > top {
                    second = top;
                    top = p;
                } else if p > second {
                    second = p;
                }
            }
            (top - second).clamp(0.0, 1.0)
        })
        .collect();
    Heatmap {
        kind: HeatmapKind::ProbabilityMargin,
        values: Tensor::from_vec(&[probs.height(), probs.width()], values)
            .expect("margins are finite"),
    }
}

/// The |C| + 3 image-level aggregates of one softmax field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyFeatures {
    pub mean_entropy: f64,
    pub mean_variation_ratio: f64,
    pub mean_margin: f64,
    pub class_mean_probs: Vec<f64>,
}

impl UncertaintyFeatures {
    pub fn len(&self) -> usize {
        self.class_mean_probs.len() + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flat feature vector: [E, V, M, p_0, ..., p_{C-1}].
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.push(self.mean_entropy);
        out.push(self.mean_variation_ratio);
        out.push(self.mean_margin);
        out.extend_from_slice(&self.class_mean_probs);
        out
    }

    pub fn from_vec(values: &[f64]) -> Result<UncertaintyFeatures> {
        if values.len() < 5 {
            return Err(CoreError::InvalidArgument(format!(
                "feature vector needs at least 5 entries, got {}",
                values.len()
            )));
        }
        Ok(UncertaintyFeatures {
            mean_entropy: values[0],
            mean_variation_ratio: values[1],
            mean_margin: values[2],
            class_mean_probs: values[3..].to_vec(),
        })
    }
}

/// Computes the feature vector: means of the three heatmaps plus the
/// pixel-mean probability of every class channel.
pub fn aggregate_features(probs: &SoftmaxField) -> UncertaintyFeatures {
    let classes = probs.class_count();
    let mut class_sums = vec![0.0f64; classes];
    for pixel in probs.pixels() {
        for (sum, &p) in class_sums.iter_mut().zip(pixel) {
            *sum += p;
        }
    }
    let pixels = probs.pixel_count() as f64;
    for sum in &mut class_sums {
        *sum /= pixels;
    }
    UncertaintyFeatures {
        mean_entropy: entropy_heatmap(probs).mean(),
        mean_variation_ratio: variation_ratio_heatmap(probs).mean(),
        mean_margin: probability_margin_heatmap(probs).mean(),
        class_mean_probs: class_sums,
    }
}

/// One exported feature row: image id, attack label, then the features.
pub fn write_features_csv(
    writer: &mut impl Write,
    num_classes: usize,
    rows: &[(String, String, UncertaintyFeatures)],
) -> Result<()> {
    write!(writer, "image_id,attack,mean_entropy,mean_variation_ratio,mean_margin")?;
    for c in 0..num_classes {
        write!(writer, ",class_mean_prob_{c}")?;
    }
    writeln!(writer)?;
    for (image_id, attack, features) in rows {
        if features.class_mean_probs.len() != num_classes {
            return Err(CoreError::InvalidArgument(format!(
                "feature row has {} class means, expected {num_classes}",
                features.class_mean_probs.len()
            )));
        }
        write!(writer, "{image_id},{attack}")?;
        for v in features.to_vec() {
            write!(writer, ",{v:.12}")?;
        }
        writeln!(writer)?;
    }
    Ok(())
}
