//! One-class support vector machine with an RBF kernel, fitted on benign
//! feature vectors only by SMO-style coordinate optimization of the dual:
//!
//!   min 0.5 a' Q a   s.t.  0 <= a_i <= 1/(nu n),  sum a = 1
//!
//! The decision value sum_i a_i k(x_i, x) - rho is negative for outliers;
//! nu upper-bounds the fraction of fit points left outside.

use serde::{Deserialize, Serialize};

use super::{logistic, sorted_rows, Standardizer};
use crate::detectors::DetectorModel;
use crate::error::{CoreError, Result};
use crate::uncertainty::UncertaintyFeatures;

const SMO_TOLERANCE: f64 = 1e-9;
const SMO_MAX_ITERATIONS: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportVector {
    pub alpha: f64,
    pub row: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcsvmModel {
    pub standardizer: Standardizer,
    pub gamma: f64,
    pub nu: f64,
    pub support: Vec<SupportVector>,
    pub rho: f64,
    /// Median absolute raw decision value on fit data; calibration scale.
    pub score_scale: f64,
}

fn rbf(gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
    (-gamma * sq).exp()
}

impl OcsvmModel {
    pub fn raw_score(&self, features: &UncertaintyFeatures) -> f64 {
        let z = self.standardizer.apply(&features.to_vec());
        self.raw_score_standardized(&z)
    }

    fn raw_score_standardized(&self, z: &[f64]) -> f64 {
        let k: f64 = self
            .support
            .iter()
            .map(|sv| sv.alpha * rbf(self.gamma, &sv.row, z))
            .sum();
        k - self.rho
    }

    pub fn score(&self, features: &UncertaintyFeatures) -> f64 {
        logistic(self.raw_score(features) / self.score_scale)
    }
}

/// Fits the one-class SVM. `gamma` defaults to 1 / (dim * mean feature
/// variance) computed on the standardized fit data.
pub fn fit_ocsvm(
    benign: &[UncertaintyFeatures],
    gamma: Option<f64>,
    nu: f64,
) -> Result<DetectorModel> {
    if benign.len() < 10 {
        return Err(CoreError::InvalidArgument(format!(
            "one-class SVM needs at least 10 benign samples, got {}",
            benign.len()
        )));
    }
    if !(0.0 < nu && nu <= 1.0) {
        return Err(CoreError::InvalidArgument(format!("nu must be in (0, 1], got {nu}")));
    }
    let rows = sorted_rows(benign);
    let standardizer = Standardizer::fit(&rows);
    let z = standardizer.apply_all(&rows);
    let n = z.len();
    let dim = standardizer.dim();

    let gamma = gamma.unwrap_or_else(|| {
        let mut var_sum = 0.0;
        for f in 0..dim {
            let mean: f64 = z.iter().map(|r| r[f]).sum::<f64>() / n as f64;
            var_sum += z.iter().map(|r| (r[f] - mean).powi(2)).sum::<f64>() / n as f64;
        }
        let mean_var = (var_sum / dim as f64).max(1e-12);
        1.0 / (dim as f64 * mean_var)
    });

    // Dense kernel matrix; fit sets are small.
    let mut kernel = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            let v = rbf(gamma, &z[i], &z[j]);
            kernel[i * n + j] = v;
            kernel[j * n + i] = v;
        }
    }

    let upper = 1.0 / (nu * n as f64);
    let mut alpha = vec![1.0 / n as f64; n];
    // Gradient of the dual objective: G = Q a.
    let mut gradient = vec![0.0f64; n];
    for i in 0..n {
        gradient[i] = (0..n).map(|j| kernel[i * n + j] * alpha[j]).sum();
    }

    let mut converged = false;
    let mut residual = f64::INFINITY;
    for _ in 0..SMO_MAX_ITERATIONS {
        // Most violating pair: move mass from the largest gradient among
        // decreasable coordinates to the smallest among increasable ones.
        let mut i_up = None;
        let mut j_down = None;
        for idx in 0..n {
            if alpha[idx] > 1e-14 && i_up.map_or(true, |i: usize| gradient[idx] > gradient[i]) {
                i_up = Some(idx);
            }
            if alpha[idx] < upper - 1e-14
                && j_down.map_or(true, |j: usize| gradient[idx] < gradient[j])
            {
                j_down = Some(idx);
            }
        }
        let (i, j) = match (i_up, j_down) {
            (Some(i), Some(j)) => (i, j),
            _ => break,
        };
        residual = gradient[i] - gradient[j];
        if residual <= SMO_TOLERANCE {
            converged = true;
            break;
        }
        let denom = (kernel[i * n + i] + kernel[j * n + j] - 2.0 * kernel[i * n + j]).max(1e-12);
        let step = (residual / denom).min(alpha[i]).min(upper - alpha[j]);
        alpha[i] -= step;
        alpha[j] += step;
        for idx in 0..n {
            gradient[idx] += step * (kernel[idx * n + j] - kernel[idx * n + i]);
        }
    }
    if !converged {
        return Err(CoreError::NoConvergence {
            residual,
            iterations: SMO_MAX_ITERATIONS,
        });
    }

    // rho makes the decision value vanish on free support vectors.
    let free: Vec<usize> = (0..n)
        .filter(|&i| alpha[i] > 1e-8 * upper && alpha[i] < upper * (1.0 - 1e-8))
        .collect();
    let rho = if free.is_empty() {
        gradient
            .iter()
            .zip(&alpha)
            .filter(|(_, &a)| a > 1e-14)
            .map(|(&g, _)| g)
            .sum::<f64>()
            / alpha.iter().filter(|&&a| a > 1e-14).count().max(1) as f64
    } else {
        free.iter().map(|&i| gradient[i]).sum::<f64>() / free.len() as f64
    };

    let support: Vec<SupportVector> = (0..n)
        .filter(|&i| alpha[i] > 1e-12)
        .map(|i| SupportVector {
            alpha: alpha[i],
            row: z[i].clone(),
        })
        .collect();

    let mut model = OcsvmModel {
        standardizer,
        gamma,
        nu,
        support,
        rho,
        score_scale: 1.0,
    };
    let mut raw_magnitudes: Vec<f64> = z
        .iter()
        .map(|row| model.raw_score_standardized(row).abs())
        .collect();
    raw_magnitudes.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    model.score_scale = raw_magnitudes[raw_magnitudes.len() / 2].max(1e-9);
    Ok(DetectorModel::Ocsvm(model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detectors::DetectorInput;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gaussian_features(n: usize, dim: usize, seed: u64) -> Vec<UncertaintyFeatures> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        (0..n)
            .map(|_| {
                let row: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
                UncertaintyFeatures::from_vec(&row).unwrap()
            })
            .collect()
    }

    #[test]
    fn rejects_tiny_fit_sets_and_bad_nu() {
        let fit = gaussian_features(5, 6, 0);
        assert!(fit_ocsvm(&fit, None, 0.1).is_err());
        let fit = gaussian_features(20, 6, 0);
        assert!(fit_ocsvm(&fit, None, 0.0).is_err());
        assert!(fit_ocsvm(&fit, None, 1.5).is_err());
    }

    #[test]
    fn inliers_score_high_and_far_points_low() {
        let fit = gaussian_features(80, 6, 1);
        let model = fit_ocsvm(&fit, None, 0.1).unwrap();
        // The sample mean is deep inside the mass.
        let center = UncertaintyFeatures::from_vec(&vec![0.0; 6]).unwrap();
        let d_center = model.score(&DetectorInput::Features(&center)).unwrap();
        assert!(d_center > 0.5, "center score {d_center}");

        let far = UncertaintyFeatures::from_vec(&vec![10.0; 6]).unwrap();
        let d_far = model.score(&DetectorInput::Features(&far)).unwrap();
        assert!(d_far < 0.5, "far score {d_far}");
        assert!(d_far < d_center);
    }

    #[test]
    fn nu_bounds_the_outlier_fraction() {
        // The nu-property on a 200-point Gaussian sample: at most nu + 5%
        // of fit points get a negative decision value.
        let fit = gaussian_features(200, 8, 7);
        let nu = 0.1;
        let model = match fit_ocsvm(&fit, None, nu).unwrap() {
            DetectorModel::Ocsvm(m) => m,
            _ => unreachable!(),
        };
        let outliers = fit
            .iter()
            .filter(|f| model.raw_score(f) < 0.0)
            .count() as f64
            / fit.len() as f64;
        assert!(outliers <= nu + 0.05, "outlier fraction {outliers}");
    }

    #[test]
    fn fit_is_invariant_under_presentation_order() {
        let mut fit = gaussian_features(40, 5, 3);
        let model_a = fit_ocsvm(&fit, None, 0.1).unwrap();
        fit.reverse();
        fit.swap(0, 7);
        let model_b = fit_ocsvm(&fit, None, 0.1).unwrap();
        assert_eq!(model_a, model_b);
    }

    #[test]
    fn scores_stay_in_unit_interval_and_repeat() {
        let fit = gaussian_features(30, 5, 4);
        let model = fit_ocsvm(&fit, None, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let probe: Vec<f64> = (0..5).map(|_| rng.gen_range(-20.0..20.0)).collect();
            let f = UncertaintyFeatures::from_vec(&probe).unwrap();
            let a = model.score(&DetectorInput::Features(&f)).unwrap();
            let b = model.score(&DetectorInput::Features(&f)).unwrap();
            assert!((0.0..=1.0).contains(&a));
            assert_eq!(a, b);
        }
    }
}
