//! Robust ellipsoid outlier model: iteratively trimmed location/scatter
//! estimation on benign features, with the scatter rescaled by the standard
//! truncation consistency factor so that squared Mahalanobis distances are
//! comparable to a chi-squared quantile.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::{logistic, sorted_rows, Standardizer};
use crate::detectors::DetectorModel;
use crate::error::{CoreError, Result};
use crate::uncertainty::UncertaintyFeatures;

const TRIM_ROUNDS: usize = 10;
const KEEP_FRACTION: f64 = 0.75;
const RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipseModel {
    pub standardizer: Standardizer,
    pub location: Vec<f64>,
    /// Inverse of the consistency-corrected scatter, row-major.
    pub precision: Vec<Vec<f64>>,
    /// Chi-squared quantile at the configured level for `dim` degrees.
    pub chi2_quantile: f64,
    /// Interquartile range of fit raw scores; calibration scale.
    pub score_scale: f64,
}

impl EllipseModel {
    /// Squared Mahalanobis distance to the robust location.
    pub fn raw_score(&self, features: &UncertaintyFeatures) -> f64 {
        let z = self.standardizer.apply(&features.to_vec());
        self.raw_score_standardized(&z)
    }

    fn raw_score_standardized(&self, z: &[f64]) -> f64 {
        let dim = self.location.len();
        let centered: Vec<f64> = z.iter().zip(&self.location).map(|(&v, &m)| v - m).collect();
        let mut total = 0.0;
        for i in 0..dim {
            let mut dot = 0.0;
            for j in 0..dim {
                dot += self.precision[i][j] * centered[j];
            }
            total += centered[i] * dot;
        }
        total.max(0.0)
    }

    pub fn score(&self, features: &UncertaintyFeatures) -> f64 {
        logistic((self.chi2_quantile - self.raw_score(features)) / self.score_scale)
    }
}

fn mean_and_covariance(rows: &[&Vec<f64>], dim: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for row in rows {
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut cov = vec![vec![0.0; dim]; dim];
    for row in rows {
        for i in 0..dim {
            let di = row[i] - mean[i];
            for j in i..dim {
                cov[i][j] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            cov[i][j] /= n;
            cov[j][i] = cov[i][j];
        }
        cov[i][i] += RIDGE;
    }
    (mean, cov)
}

/// Cholesky factorization; fails on non-positive-definite input.
fn cholesky(matrix: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let dim = matrix.len();
    let mut lower = vec![vec![0.0; dim]; dim];
    for i in 0..dim {
        for j in 0..=i {
            let mut sum = matrix[i][j];
            for k in 0..j {
                sum -= lower[i][k] * lower[j][k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(CoreError::Numeric(
                        "covariance is singular even after regularization".into(),
                    ));
                }
                lower[i][j] = sum.sqrt();
            } else {
                lower[i][j] = sum / lower[j][j];
            }
        }
    }
    Ok(lower)
}

/// Inverse of a symmetric positive-definite matrix via its Cholesky factor.
fn spd_inverse(matrix: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let dim = matrix.len();
    let lower = cholesky(matrix)?;
    // Solve L L' X = I column by column.
    let mut inverse = vec![vec![0.0; dim]; dim];
    for col in 0..dim {
        // Forward solve L y = e_col.
        let mut y = vec![0.0; dim];
        for i in 0..dim {
            let mut sum = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                sum -= lower[i][k] * y[k];
            }
            y[i] = sum / lower[i][i];
        }
        // Backward solve L' x = y.
        for i in (0..dim).rev() {
            let mut sum = y[i];
            for k in i + 1..dim {
                sum -= lower[k][i] * inverse[k][col];
            }
            inverse[i][col] = sum / lower[i][i];
        }
    }
    Ok(inverse)
}

fn mahalanobis_sq(row: &[f64], mean: &[f64], precision: &[Vec<f64>]) -> f64 {
    let dim = mean.len();
    let centered: Vec<f64> = row.iter().zip(mean).map(|(&v, &m)| v - m).collect();
    let mut total = 0.0;
    for i in 0..dim {
        let mut dot = 0.0;
        for j in 0..dim {
            dot += precision[i][j] * centered[j];
        }
        total += centered[i] * dot;
    }
    total
}

/// Consistency factor for a scatter matrix estimated from the central
/// `fraction` of a Gaussian sample: fraction / P(chi2_{d+2} <= q) with q the
/// chi2_d quantile at `fraction`.
fn truncation_consistency(dim: usize, fraction: f64) -> f64 {
    let chi_d = ChiSquared::new(dim as f64).expect("positive dof");
    let chi_d2 = ChiSquared::new((dim + 2) as f64).expect("positive dof");
    let q = chi_d.inverse_cdf(fraction);
    fraction / chi_d2.cdf(q)
}

/// Fits the robust ellipsoid. `quantile` sets the chi-squared level that
/// centers the calibrated score.
pub fn fit_ellipse(benign: &[UncertaintyFeatures], quantile: f64) -> Result<DetectorModel> {
    if benign.is_empty() {
        return Err(CoreError::InvalidArgument("empty fit set".into()));
    }
    if !(0.0 < quantile && quantile < 1.0) {
        return Err(CoreError::InvalidArgument(format!(
            "quantile must be in (0, 1), got {quantile}"
        )));
    }
    let rows = sorted_rows(benign);
    let dim = rows[0].len();
    if rows.len() <= dim {
        return Err(CoreError::InvalidArgument(format!(
            "need more samples ({}) than feature dimensions ({dim})",
            rows.len()
        )));
    }
    let standardizer = Standardizer::fit(&rows);
    let z = standardizer.apply_all(&rows);
    let n = z.len();
    let keep = ((n as f64 * KEEP_FRACTION).ceil() as usize).clamp(dim + 1, n);

    // Iteratively re-estimate on the `keep` points with the smallest
    // Mahalanobis distance under the current estimate.
    let all: Vec<&Vec<f64>> = z.iter().collect();
    let (mut mean, mut cov) = mean_and_covariance(&all, dim);
    for _ in 0..TRIM_ROUNDS {
        let precision = spd_inverse(&cov)?;
        let mut scored: Vec<(f64, usize)> = z
            .iter()
            .enumerate()
            .map(|(i, row)| (mahalanobis_sq(row, &mean, &precision), i))
            .collect();
        scored.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let kept: Vec<&Vec<f64>> = scored[..keep].iter().map(|&(_, i)| &z[i]).collect();
        let estimate = mean_and_covariance(&kept, dim);
        mean = estimate.0;
        cov = estimate.1;
    }

    // Rescale the trimmed scatter to be consistent for Gaussian data.
    let consistency = truncation_consistency(dim, keep as f64 / n as f64);
    for row in &mut cov {
        for v in row.iter_mut() {
            *v *= consistency;
        }
    }
    let precision = spd_inverse(&cov)?;

    let chi2_quantile = ChiSquared::new(dim as f64)
        .expect("positive dof")
        .inverse_cdf(quantile);
    let mut model = EllipseModel {
        standardizer,
        location: mean,
        precision,
        chi2_quantile,
        score_scale: 1.0,
    };
    let mut raws: Vec<f64> = z.iter().map(|row| model.raw_score_standardized(row)).collect();
    raws.sort_by(|a, b| a.partial_cmp(b).expect("finite raws"));
    let q1 = raws[raws.len() / 4];
    let q3 = raws[(raws.len() * 3) / 4];
    model.score_scale = (q3 - q1).max(1e-9);
    Ok(DetectorModel::Ellipse(model))
}
