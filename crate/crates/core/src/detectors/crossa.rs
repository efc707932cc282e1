//! L1-penalized logistic regression over the image-level features, fitted
//! on benign data plus adversarial examples from one weak attack. Solved by
//! proximal gradient descent (soft-thresholding after each gradient step);
//! the intercept carries no penalty.

use serde::{Deserialize, Serialize};

use super::{logistic, sorted_rows, Standardizer};
use crate::detectors::DetectorModel;
use crate::error::{CoreError, Result};
use crate::uncertainty::UncertaintyFeatures;

const MAX_ITERATIONS: usize = 100_000;
const OBJECTIVE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossAModel {
    pub standardizer: Standardizer,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub converged: bool,
}

impl CrossAModel {
    pub fn score(&self, features: &UncertaintyFeatures) -> f64 {
        let z = self.standardizer.apply(&features.to_vec());
        let logit: f64 =
            z.iter().zip(&self.weights).map(|(&x, &w)| x * w).sum::<f64>() + self.intercept;
        logistic(logit)
    }

    pub fn nonzero_weights(&self, tolerance: f64) -> usize {
        self.weights.iter().filter(|w| w.abs() > tolerance).count()
    }
}

fn log1p_exp(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Mean logistic loss plus the L1 penalty on the weights.
fn objective(rows: &[Vec<f64>], targets: &[f64], weights: &[f64], intercept: f64, lambda: f64) -> f64 {
    let mut loss = 0.0;
    for (row, &y) in rows.iter().zip(targets) {
        let f: f64 = row.iter().zip(weights).map(|(&x, &w)| x * w).sum::<f64>() + intercept;
        loss += log1p_exp(-y * f);
    }
    loss / rows.len() as f64 + lambda * weights.iter().map(|w| w.abs()).sum::<f64>()
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Largest eigenvalue of (1/n) X'X over the feature-plus-intercept design,
/// by power iteration; bounds the logistic gradient Lipschitz constant.
fn design_spectral_bound(rows: &[Vec<f64>]) -> f64 {
    let dim = rows[0].len() + 1;
    let n = rows.len() as f64;
    let mut v = vec![1.0f64; dim];
    let mut eigen = 1.0;
    for _ in 0..60 {
        let mut next = vec![0.0f64; dim];
        for row in rows {
            // x = [row, 1]; next += x (x . v) / n
            let mut dot = v[dim - 1];
            for (j, &x) in row.iter().enumerate() {
                dot += x * v[j];
            }
            for (j, &x) in row.iter().enumerate() {
                next[j] += x * dot / n;
            }
            next[dim - 1] += dot / n;
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-30 {
            return 1.0;
        }
        eigen = norm;
        for (a, b) in v.iter_mut().zip(&next) {
            *a = b / norm;
        }
    }
    eigen
}

/// Fits the supervised detector. Benign images are the positive class
/// (d near 1); adversarial ones the negative class.
pub fn fit_crossa(
    benign: &[UncertaintyFeatures],
    adversarial: &[UncertaintyFeatures],
    lambda: f64,
) -> Result<DetectorModel> {
    if benign.is_empty() || adversarial.is_empty() {
        return Err(CoreError::InvalidArgument(
            "supervised fit needs both benign and adversarial samples".into(),
        ));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(CoreError::InvalidArgument(format!("bad lambda {lambda}")));
    }
    let benign_rows = sorted_rows(benign);
    let adv_rows = sorted_rows(adversarial);
    let mut rows = benign_rows;
    let mut targets = vec![1.0f64; rows.len()];
    rows.extend(adv_rows);
    targets.extend(std::iter::repeat(-1.0).take(rows.len() - targets.len()));
    let standardizer = Standardizer::fit(&rows);
    let z = standardizer.apply_all(&rows);
    let dim = standardizer.dim();

    // Step size from the logistic-loss Lipschitz bound L = lambda_max / 4.
    let step = 1.0 / (design_spectral_bound(&z) / 4.0).max(1e-12);

    let mut weights = vec![0.0f64; dim];
    let mut intercept = 0.0f64;
    let mut best = (
        objective(&z, &targets, &weights, intercept, lambda),
        weights.clone(),
        intercept,
    );
    let mut converged = false;
    let n = z.len() as f64;

    for _ in 0..MAX_ITERATIONS {
        // Gradient of the mean logistic loss.
        let mut grad_w = vec![0.0f64; dim];
        let mut grad_b = 0.0f64;
        for (row, &y) in z.iter().zip(&targets) {
            let f: f64 = row.iter().zip(&weights).map(|(&x, &w)| x * w).sum::<f64>() + intercept;
            let coeff = -y * logistic(-y * f) / n;
            for (g, &x) in grad_w.iter_mut().zip(row) {
                *g += coeff * x;
            }
            grad_b += coeff;
        }
        for (w, g) in weights.iter_mut().zip(&grad_w) {
            *w = soft_threshold(*w - step * g, step * lambda);
        }
        intercept -= step * grad_b;

        let obj = objective(&z, &targets, &weights, intercept, lambda);
        let decrease = best.0 - obj;
        if obj < best.0 {
            best = (obj, weights.clone(), intercept);
        }
        if decrease.abs() < OBJECTIVE_TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        eprintln!(
            "crossa fit hit the iteration cap; returning the best iterate (objective {:.6e})",
            best.0
        );
    }
    Ok(DetectorModel::CrossA(CrossAModel {
        standardizer,
        weights: best.1,
        intercept: best.2,
        lambda,
        converged,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detectors::DetectorInput;
    use crate::metrics::{ada_star, ScoredSample};

    fn feat(values: &[f64]) -> UncertaintyFeatures {
        let mut row = values.to_vec();
        while row.len() < 5 {
            row.push(0.0);
        }
        UncertaintyFeatures::from_vec(&row).unwrap()
    }

    fn unwrap_crossa(model: DetectorModel) -> CrossAModel {
        match model {
            DetectorModel::CrossA(m) => m,
            _ => unreachable!(),
        }
    }

    #[test]
    fn full_shrinkage_leaves_intercept_only() {
        let benign: Vec<UncertaintyFeatures> =
            (0..8).map(|i| feat(&[0.1 + i as f64 * 0.01, 1.0])).collect();
        let adv: Vec<UncertaintyFeatures> =
            (0..8).map(|i| feat(&[0.9 - i as f64 * 0.01, -1.0])).collect();
        let model = unwrap_crossa(fit_crossa(&benign, &adv, 1e6).unwrap());
        assert_eq!(model.nonzero_weights(1e-12), 0);
        let d0 = model.score(&feat(&[0.0, 0.0]));
        let d1 = model.score(&feat(&[5.0, -3.0]));
        assert_eq!(d0, d1, "intercept-only model must be constant");
    }

    #[test]
    fn separable_one_dimensional_data_reaches_perfect_ada() {
        let benign: Vec<UncertaintyFeatures> =
            (0..10).map(|i| feat(&[0.1 + i as f64 * 0.005])).collect();
        let adv: Vec<UncertaintyFeatures> =
            (0..10).map(|i| feat(&[0.8 + i as f64 * 0.005])).collect();
        let model = fit_crossa(&benign, &adv, 1e-4).unwrap();
        let samples: Vec<ScoredSample> = benign
            .iter()
            .map(|f| ScoredSample::benign(model.score(&DetectorInput::Features(f)).unwrap()))
            .chain(adv.iter().map(|f| {
                ScoredSample::perturbed(model.score(&DetectorInput::Features(f)).unwrap())
            }))
            .collect();
        assert_eq!(ada_star(&samples), 1.0);
    }

    #[test]
    fn objective_matches_independent_coordinate_search() {
        // Three-feature toy problem; the oracle is coordinate descent with
        // golden-section line search, entirely independent of the proximal
        // path.
        let benign: Vec<UncertaintyFeatures> = vec![
            feat(&[0.2, 1.1, 0.4]),
            feat(&[0.1, 0.9, 0.35]),
            feat(&[0.3, 1.3, 0.5]),
            feat(&[0.25, 1.0, 0.3]),
            feat(&[0.15, 1.2, 0.45]),
        ];
        let adv: Vec<UncertaintyFeatures> = vec![
            feat(&[0.8, 0.4, 0.9]),
            feat(&[0.7, 0.5, 0.8]),
            feat(&[0.9, 0.35, 0.95]),
            feat(&[0.75, 0.45, 0.7]),
            feat(&[0.85, 0.5, 0.85]),
        ];
        let lambda = 0.05;
        let model = unwrap_crossa(fit_crossa(&benign, &adv, lambda).unwrap());

        // Rebuild the standardized design exactly as the fit does.
        let benign_rows = sorted_rows(&benign);
        let adv_rows = sorted_rows(&adv);
        let mut rows = benign_rows;
        let mut targets = vec![1.0f64; rows.len()];
        rows.extend(adv_rows);
        while targets.len() < rows.len() {
            targets.push(-1.0);
        }
        let z = model.standardizer.apply_all(&rows);

        let golden = |mut lo: f64, mut hi: f64, f: &dyn Fn(f64) -> f64| -> f64 {
            let phi = (5f64.sqrt() - 1.0) / 2.0;
            for _ in 0..200 {
                let a = hi - phi * (hi - lo);
                let b = lo + phi * (hi - lo);
                if f(a) < f(b) {
                    hi = b;
                } else {
                    lo = a;
                }
            }
            (lo + hi) / 2.0
        };

        let mut w = vec![0.0f64; 5];
        let mut b = 0.0f64;
        for _sweep in 0..400 {
            for coord in 0..w.len() {
                let w_snapshot = w.clone();
                let eval = |v: f64| {
                    let mut trial = w_snapshot.clone();
                    trial[coord] = v;
                    objective(&z, &targets, &trial, b, lambda)
                };
                w[coord] = golden(-10.0, 10.0, &eval);
            }
            let w_snapshot = w.clone();
            let eval_b = |v: f64| objective(&z, &targets, &w_snapshot, v, lambda);
            b = golden(-10.0, 10.0, &eval_b);
        }
        let oracle_obj = objective(&z, &targets, &w, b, lambda);
        let fit_obj = objective(&z, &targets, &model.weights, model.intercept, lambda);
        assert!(
            (fit_obj - oracle_obj).abs() <= 1e-6,
            "fit {fit_obj} vs oracle {oracle_obj}"
        );
    }

    #[test]
    fn growing_lambda_never_adds_nonzero_weights() {
        let benign: Vec<UncertaintyFeatures> = (0..12)
            .map(|i| feat(&[0.2 + 0.01 * i as f64, 1.0 - 0.02 * i as f64, 0.3, 0.01 * i as f64]))
            .collect();
        let adv: Vec<UncertaintyFeatures> = (0..12)
            .map(|i| feat(&[0.7 + 0.01 * i as f64, 0.3 + 0.02 * i as f64, 0.8, 0.02 * i as f64]))
            .collect();
        let mut last = usize::MAX;
        for lambda in [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0] {
            let model = unwrap_crossa(fit_crossa(&benign, &adv, lambda).unwrap());
            let nonzero = model.nonzero_weights(1e-8);
            assert!(nonzero <= last, "lambda {lambda}: {nonzero} > {last}");
            last = nonzero;
        }
    }

    #[test]
    fn fit_order_invariance() {
        let benign: Vec<UncertaintyFeatures> =
            (0..9).map(|i| feat(&[0.1 * i as f64, 1.0])).collect();
        let adv: Vec<UncertaintyFeatures> =
            (0..9).map(|i| feat(&[0.1 * i as f64 + 0.5, -1.0])).collect();
        let a = fit_crossa(&benign, &adv, 0.01).unwrap();
        let mut shuffled_benign = benign.clone();
        shuffled_benign.reverse();
        let mut shuffled_adv = adv.clone();
        shuffled_adv.rotate_left(4);
        let b = fit_crossa(&shuffled_benign, &shuffled_adv, 0.01).unwrap();
        assert_eq!(a, b);
    }
}
