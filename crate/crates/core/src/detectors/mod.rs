//! Detection models producing d(x), the probability that an image is
//! benign. An image is flagged as perturbed when d(x) < tau.
//!
//! Five variants: thresholding the mean entropy, a one-class SVM and a
//! robust-ellipsoid outlier model (both fitted on benign data only), an
//! L1-regularized logistic regression, and a small conv net reading entire
//! entropy heatmaps. The unsupervised contract is enforced by the fit
//! interfaces: OCSVM and Ellipse fits accept benign features only.

pub mod crossa;
pub mod ellipse;
pub mod heatmap_cnn;
pub mod ocsvm;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::uncertainty::{Heatmap, UncertaintyFeatures};

pub use crossa::{fit_crossa, CrossAModel};
pub use ellipse::{fit_ellipse, EllipseModel};
pub use heatmap_cnn::{fit_heatmap_cnn, HeatmapCnnModel, HeatmapTrainConfig};
pub use ocsvm::{fit_ocsvm, OcsvmModel};

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sorts feature rows lexicographically so that fits are invariant under
/// the order of fit-set presentation.
pub(crate) fn sorted_rows(features: &[UncertaintyFeatures]) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = features.iter().map(|f| f.to_vec()).collect();
    rows.sort_by(|a, b| a.partial_cmp(b).expect("finite features"));
    rows
}

/// Per-feature mean and standard deviation from fit data; features with
/// (near-)zero spread are passed through centered only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Standardizer {
        let dim = rows[0].len();
        let n = rows.len() as f64;
        let mut means = vec![0.0; dim];
        for row in rows {
            for (m, &v) in means.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut means {
            *m /= n;
        }
        let mut stds = vec![0.0; dim];
        for row in rows {
            for ((s, &v), &m) in stds.iter_mut().zip(row).zip(&means) {
                *s += (v - m).powi(2);
            }
        }
        for s in &mut stds {
            *s = (*s / n).sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        Standardizer { means, stds }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((&v, &m), &s)| (v - m) / s)
            .collect()
    }

    pub fn apply_all(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.apply(r)).collect()
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }
}

/// Single-feature detector: linear score on the mean entropy between the
/// extremes seen at fit time, clamped into [0, 1]. Low entropy maps to
/// d near 1 (benign), high entropy to d near 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyDetector {
    pub entropy_min: f64,
    pub entropy_max: f64,
}

impl EntropyDetector {
    fn score(&self, features: &UncertaintyFeatures) -> f64 {
        let span = self.entropy_max - self.entropy_min;
        if span < 1e-15 {
            return 0.5;
        }
        ((self.entropy_max - features.mean_entropy) / span).clamp(0.0, 1.0)
    }
}

/// Thresholding detector on the mean entropy alone.
pub fn fit_entropy(benign: &[UncertaintyFeatures]) -> Result<DetectorModel> {
    if benign.len() < 2 {
        return Err(CoreError::InvalidArgument(
            "entropy detector needs at least 2 benign samples".into(),
        ));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for f in benign {
        lo = lo.min(f.mean_entropy);
        hi = hi.max(f.mean_entropy);
    }
    Ok(DetectorModel::Entropy(EntropyDetector {
        entropy_min: lo,
        entropy_max: hi,
    }))
}

/// Input accepted by `DetectorModel::score`; must match the variant.
#[derive(Debug, Clone, Copy)]
pub enum DetectorInput<'a> {
    Features(&'a UncertaintyFeatures),
    Heatmap(&'a Heatmap),
}

/// A fitted detector. Immutable; scoring is deterministic and safe to run
/// concurrently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum DetectorModel {
    Entropy(EntropyDetector),
    Ocsvm(OcsvmModel),
    Ellipse(EllipseModel),
    CrossA(CrossAModel),
    Heatmap(HeatmapCnnModel),
}

impl DetectorModel {
    pub fn variant_name(&self) -> &'static str {
        match self {
            DetectorModel::Entropy(_) => "entropy",
            DetectorModel::Ocsvm(_) => "ocsvm",
            DetectorModel::Ellipse(_) => "ellipse",
            DetectorModel::CrossA(_) => "crossa",
            DetectorModel::Heatmap(_) => "heatmap",
        }
    }

    /// True for detectors whose fit consumes adversarial examples.
    pub fn is_supervised(&self) -> bool {
        matches!(self, DetectorModel::CrossA(_) | DetectorModel::Heatmap(_))
    }

    /// Scores one input; the input kind must match the variant.
    pub fn score(&self, input: &DetectorInput) -> Result<f64> {
        let d = match (self, input) {
            (DetectorModel::Entropy(m), DetectorInput::Features(f)) => m.score(f),
            (DetectorModel::Ocsvm(m), DetectorInput::Features(f)) => m.score(f),
            (DetectorModel::Ellipse(m), DetectorInput::Features(f)) => m.score(f),
            (DetectorModel::CrossA(m), DetectorInput::Features(f)) => m.score(f),
            (DetectorModel::Heatmap(m), DetectorInput::Heatmap(h)) => m.score(h)?,
            (model, DetectorInput::Heatmap(_)) => {
                return Err(CoreError::InvalidArgument(format!(
                    "{} detector consumes feature vectors, not heatmaps",
                    model.variant_name()
                )))
            }
            (model, DetectorInput::Features(_)) => {
                return Err(CoreError::InvalidArgument(format!(
                    "{} detector consumes heatmaps, not feature vectors",
                    model.variant_name()
                )))
            }
        };
        debug_assert!((0.0..=1.0).contains(&d), "score {d} outside [0, 1]");
        Ok(d.clamp(0.0, 1.0))
    }

    /// Persists the fitted parameters as a plain-text file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::Format(format!("detector serialization: {e}")))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<DetectorModel> {
        let raw = fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| CoreError::Format(format!("detector parse: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictLabel {
    Benign,
    Perturbed,
}

/// Thresholded detector decision: perturbed iff d < tau.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub d: f64,
    pub tau: f64,
    pub label: VerdictLabel,
}

pub fn classify(d: f64, tau: f64) -> Verdict {
    Verdict {
        d,
        tau,
        label: if d < tau {
            VerdictLabel::Perturbed
        } else {
            VerdictLabel::Benign
        },
    }
}
