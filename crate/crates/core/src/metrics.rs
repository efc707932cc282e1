//! Attack-strength and detection metrics: APSR, ADA over a fixed threshold
//! grid, AuROC by pair counting, TPR at a capped benign false-positive rate,
//! and k-fold cross-validation over paired benign/adversarial samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detectors::{
    fit_crossa, fit_ellipse, fit_entropy, fit_heatmap_cnn, fit_ocsvm, DetectorInput,
    DetectorModel, HeatmapTrainConfig,
};
use crate::error::{CoreError, Result};
use crate::labelmap::LabelMap;
use crate::uncertainty::{Heatmap, UncertaintyFeatures};

/// Number of thresholds in the ADA grid, equally spaced over [0, 1] with
/// both endpoints included.
pub const ADA_GRID_POINTS: usize = 40;

/// A detector score with its ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    /// Probability of being benign, in [0, 1].
    pub d: f64,
    pub perturbed: bool,
}

impl ScoredSample {
    pub fn benign(d: f64) -> ScoredSample {
        ScoredSample { d, perturbed: false }
    }

    pub fn perturbed(d: f64) -> ScoredSample {
        ScoredSample { d, perturbed: true }
    }
}

/// Attack pixel success rate: the fraction of pixels whose predicted class
/// differs from the ground truth.
pub fn apsr(predictions: &LabelMap, labels: &LabelMap) -> Result<f64> {
    predictions.disagreement(labels)
}

/// Detection accuracy at one threshold: benign counts as correct when
/// d >= tau, perturbed when d < tau.
pub fn ada(samples: &[ScoredSample], tau: f64) -> f64 {
    assert!(!samples.is_empty(), "ada needs samples");
    let correct = samples
        .iter()
        .filter(|s| if s.perturbed { s.d < tau } else { s.d >= tau })
        .count();
    correct as f64 / samples.len() as f64
}

/// The threshold grid tau_i = i / (points - 1).
pub fn ada_grid() -> impl Iterator<Item = f64> {
    (0..ADA_GRID_POINTS).map(|i| i as f64 / (ADA_GRID_POINTS - 1) as f64)
}

/// Best detection accuracy over the fixed threshold grid.
pub fn ada_star(samples: &[ScoredSample]) -> f64 {
    ada_grid()
        .map(|tau| ada(samples, tau))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Area under the ROC curve computed as the Mann-Whitney statistic:
/// P(d_benign > d_perturbed) + 0.5 P(tie) over all cross-class pairs.
pub fn auroc(samples: &[ScoredSample]) -> Result<f64> {
    let benign: Vec<f64> = samples.iter().filter(|s| !s.perturbed).map(|s| s.d).collect();
    let perturbed: Vec<f64> = samples.iter().filter(|s| s.perturbed).map(|s| s.d).collect();
    if benign.is_empty() || perturbed.is_empty() {
        return Err(CoreError::InvalidArgument(
            "auroc needs both benign and perturbed samples".into(),
        ));
    }
    let mut wins = 0.0f64;
    for &b in &benign {
        for &p in &perturbed {
            if b > p {
                wins += 1.0;
            } else if b == p {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (benign.len() * perturbed.len()) as f64)
}

/// True positive rate at the largest threshold keeping the benign
/// false-positive rate (benign with d < tau) at or below the cap.
/// Positives are the perturbed images.
pub fn tpr_at_fpr(samples: &[ScoredSample], fpr_cap: f64) -> Result<f64> {
    let mut benign: Vec<f64> = samples.iter().filter(|s| !s.perturbed).map(|s| s.d).collect();
    let perturbed: Vec<f64> = samples.iter().filter(|s| s.perturbed).map(|s| s.d).collect();
    if benign.is_empty() || perturbed.is_empty() {
        return Err(CoreError::InvalidArgument(
            "tpr_at_fpr needs both benign and perturbed samples".into(),
        ));
    }
    benign.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let allowed = (fpr_cap * benign.len() as f64).floor() as usize;
    // FPR(tau) jumps as tau passes each benign score; the largest feasible
    // tau equals the (allowed+1)-th smallest benign score, or the top of
    // the range when every benign image may be flagged.
    let tau = if allowed >= benign.len() {
        f64::INFINITY
    } else {
        benign[allowed]
    };
    let detected = perturbed.iter().filter(|&&d| d < tau).count();
    Ok(detected as f64 / perturbed.len() as f64)
}

/// Per-fold detection metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub ada_star: f64,
    pub auroc: f64,
    pub tpr5: f64,
}

/// Cross-validation outcome: the fold assignment, per-fold metrics, and
/// their mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub fold_assignment: Vec<usize>,
    pub folds: Vec<FoldMetrics>,
}

impl CvSummary {
    pub fn mean_std(&self, metric: impl Fn(&FoldMetrics) -> f64) -> (f64, f64) {
        let values: Vec<f64> = self.folds.iter().map(metric).collect();
        mean_std(&values)
    }

    pub fn ada_star(&self) -> (f64, f64) {
        self.mean_std(|f| f.ada_star)
    }

    pub fn auroc(&self) -> (f64, f64) {
        self.mean_std(|f| f.auroc)
    }

    pub fn tpr5(&self) -> (f64, f64) {
        self.mean_std(|f| f.tpr5)
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Round-robin fold assignment over shuffled indices with a fixed seed.
/// Because benign and adversarial samples are paired by source index, every
/// fold automatically holds both classes; partitions that cannot are
/// rejected.
pub fn assign_folds(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(CoreError::InvalidArgument("need at least 2 folds".into()));
    }
    if n < k {
        return Err(CoreError::InvalidArgument(format!(
            "cannot split {n} paired samples into {k} folds without a single-class fold"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut assignment = vec![0usize; n];
    for (pos, &idx) in order.iter().enumerate() {
        assignment[idx] = pos % k;
    }
    Ok(assignment)
}

/// Runs k-fold cross-validation. `fit_and_score` receives the fit indices
/// and the held-out indices (over the paired source images) and returns the
/// scored samples of the held-out fold.
pub fn cross_validate<F>(n: usize, k: usize, seed: u64, mut fit_and_score: F) -> Result<CvSummary>
where
    F: FnMut(&[usize], &[usize]) -> Result<Vec<ScoredSample>>,
{
    let assignment = assign_folds(n, k, seed)?;
    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let fit: Vec<usize> = (0..n).filter(|&i| assignment[i] != fold).collect();
        let eval: Vec<usize> = (0..n).filter(|&i| assignment[i] == fold).collect();
        let samples = fit_and_score(&fit, &eval)?;
        if samples.iter().all(|s| s.perturbed) || samples.iter().all(|s| !s.perturbed) {
            return Err(CoreError::InvalidArgument(format!(
                "fold {fold} holds a single class"
            )));
        }
        folds.push(FoldMetrics {
            fold,
            ada_star: ada_star(&samples),
            auroc: auroc(&samples)?,
            tpr5: tpr_at_fpr(&samples, 0.05)?,
        });
    }
    Ok(CvSummary {
        fold_assignment: assignment,
        folds,
    })
}

/// Parameters of one detector family, enough to fit it from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorSpec {
    Entropy,
    Ocsvm { gamma: Option<f64>, nu: f64 },
    Ellipse { quantile: f64 },
    CrossA { lambda: f64 },
    HeatmapCnn { train: HeatmapTrainConfig },
}

impl DetectorSpec {
    pub fn name(&self) -> &'static str {
        match self {
            DetectorSpec::Entropy => "entropy",
            DetectorSpec::Ocsvm { .. } => "ocsvm",
            DetectorSpec::Ellipse { .. } => "ellipse",
            DetectorSpec::CrossA { .. } => "crossa",
            DetectorSpec::HeatmapCnn { .. } => "heatmap",
        }
    }

    /// True when fitting consumes adversarial examples.
    pub fn is_supervised(&self) -> bool {
        matches!(self, DetectorSpec::CrossA { .. } | DetectorSpec::HeatmapCnn { .. })
    }
}

/// Per-image detector inputs of one sample set (benign split or one attack
/// catalog), index-aligned with the source images.
#[derive(Debug, Clone)]
pub struct DetectorData {
    pub name: String,
    pub features: Vec<UncertaintyFeatures>,
    pub entropy_maps: Vec<Heatmap>,
}

impl DetectorData {
    fn len(&self) -> usize {
        self.features.len()
    }

    fn subset_features(&self, indices: &[usize]) -> Vec<UncertaintyFeatures> {
        indices.iter().map(|&i| self.features[i].clone()).collect()
    }

    fn subset_maps(&self, indices: &[usize]) -> Vec<Heatmap> {
        indices.iter().map(|&i| self.entropy_maps[i].clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessPurpose {
    Fit,
    Evaluate,
}

/// One recorded read of a sample set, for the fit/evaluate audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub detector: String,
    pub set_name: String,
    pub purpose: AccessPurpose,
}

/// Cross-validated metrics of one detector against one attack catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub attack: String,
    pub detector: String,
    pub summary: CvSummary,
}

fn fit_detector(
    spec: &DetectorSpec,
    benign: &DetectorData,
    fit_adv: Option<&DetectorData>,
    fit_indices: &[usize],
) -> Result<DetectorModel> {
    match spec {
        DetectorSpec::Entropy => fit_entropy(&benign.subset_features(fit_indices)),
        DetectorSpec::Ocsvm { gamma, nu } => {
            fit_ocsvm(&benign.subset_features(fit_indices), *gamma, *nu)
        }
        DetectorSpec::Ellipse { quantile } => {
            fit_ellipse(&benign.subset_features(fit_indices), *quantile)
        }
        DetectorSpec::CrossA { lambda } => {
            let adv = fit_adv.expect("supervised fit checked by caller");
            fit_crossa(
                &benign.subset_features(fit_indices),
                &adv.subset_features(fit_indices),
                *lambda,
            )
        }
        DetectorSpec::HeatmapCnn { train } => {
            let adv = fit_adv.expect("supervised fit checked by caller");
            fit_heatmap_cnn(
                &benign.subset_maps(fit_indices),
                &adv.subset_maps(fit_indices),
                train,
            )
        }
    }
}

/// Fits one detector on the given index subset (pass every index for the
/// final full-fit artifact). Supervised variants require the fitting
/// catalog.
pub fn fit_detector_full(
    spec: &DetectorSpec,
    benign: &DetectorData,
    fit_adv: Option<&DetectorData>,
    indices: &[usize],
) -> Result<DetectorModel> {
    if spec.is_supervised() && fit_adv.is_none() {
        return Err(CoreError::InvalidArgument(format!(
            "{} requires a fitting catalog of adversarial examples",
            spec.name()
        )));
    }
    fit_detector(spec, benign, if spec.is_supervised() { fit_adv } else { None }, indices)
}

fn score_set(model: &DetectorModel, data: &DetectorData, indices: &[usize]) -> Result<Vec<f64>> {
    indices
        .iter()
        .map(|&i| {
            let input = match model {
                DetectorModel::Heatmap(_) => DetectorInput::Heatmap(&data.entropy_maps[i]),
                _ => DetectorInput::Features(&data.features[i]),
            };
            model.score(&input)
        })
        .collect()
}

/// Cross-validates one detector against every evaluation catalog under one
/// shared fold assignment. Per fold the detector is fitted once on the
/// benign fit folds (plus the designated fitting catalog for supervised
/// variants) and scored against the held-out fold of each catalog. Every
/// sample-set read is recorded in `access`.
pub fn cross_validate_detector(
    spec: &DetectorSpec,
    benign: &DetectorData,
    fit_adv: Option<&DetectorData>,
    evals: &[&DetectorData],
    k: usize,
    seed: u64,
    access: &mut Vec<AccessRecord>,
) -> Result<Vec<GridCell>> {
    let n = benign.len();
    if spec.is_supervised() && fit_adv.is_none() {
        return Err(CoreError::InvalidArgument(format!(
            "{} requires a fitting catalog of adversarial examples",
            spec.name()
        )));
    }
    for data in evals.iter().copied().chain(fit_adv) {
        if data.len() != n {
            return Err(CoreError::shape_mismatch(
                "detector data sets must be index-aligned",
                &[n],
                &[data.len()],
            ));
        }
    }
    let assignment = assign_folds(n, k, seed)?;

    access.push(AccessRecord {
        detector: spec.name().into(),
        set_name: benign.name.clone(),
        purpose: AccessPurpose::Fit,
    });
    if spec.is_supervised() {
        access.push(AccessRecord {
            detector: spec.name().into(),
            set_name: fit_adv.expect("checked above").name.clone(),
            purpose: AccessPurpose::Fit,
        });
    }

    let mut per_eval_folds: Vec<Vec<FoldMetrics>> = vec![Vec::with_capacity(k); evals.len()];
    for fold in 0..k {
        let fit: Vec<usize> = (0..n).filter(|&i| assignment[i] != fold).collect();
        let eval: Vec<usize> = (0..n).filter(|&i| assignment[i] == fold).collect();
        let model = fit_detector(spec, benign, if spec.is_supervised() { fit_adv } else { None }, &fit)?;
        let benign_scores = score_set(&model, benign, &eval)?;
        for (slot, eval_data) in evals.iter().enumerate() {
            let adv_scores = score_set(&model, eval_data, &eval)?;
            let samples: Vec<ScoredSample> = benign_scores
                .iter()
                .map(|&d| ScoredSample::benign(d))
                .chain(adv_scores.iter().map(|&d| ScoredSample::perturbed(d)))
                .collect();
            per_eval_folds[slot].push(FoldMetrics {
                fold,
                ada_star: ada_star(&samples),
                auroc: auroc(&samples)?,
                tpr5: tpr_at_fpr(&samples, 0.05)?,
            });
        }
    }

    access.push(AccessRecord {
        detector: spec.name().into(),
        set_name: benign.name.clone(),
        purpose: AccessPurpose::Evaluate,
    });
    for eval_data in evals {
        access.push(AccessRecord {
            detector: spec.name().into(),
            set_name: eval_data.name.clone(),
            purpose: AccessPurpose::Evaluate,
        });
    }

    Ok(evals
        .iter()
        .zip(per_eval_folds)
        .map(|(eval_data, folds)| GridCell {
            attack: eval_data.name.clone(),
            detector: spec.name().into(),
            summary: CvSummary {
                fold_assignment: assignment.clone(),
                folds,
            },
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn interleaved(n: usize) -> Vec<ScoredSample> {
        // Distinct scores alternating classes: score carries no class signal.
        (0..n)
            .map(|i| ScoredSample {
                d: i as f64 / n as f64,
                perturbed: i % 2 == 0,
            })
            .collect()
    }

    #[test]
    fn apsr_known_cases() {
        let a = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        assert_eq!(apsr(&a, &a).unwrap(), 0.0);
        let b = LabelMap::new(2, 2, vec![1, 2, 3, 0]).unwrap();
        assert_eq!(apsr(&b, &a).unwrap(), 1.0);
        let c = LabelMap::new(2, 2, vec![0, 1, 2, 0]).unwrap();
        assert_eq!(apsr(&c, &a).unwrap(), 0.25);
    }

    #[test]
    fn ada_perfect_and_uninformative() {
        let perfect = vec![
            ScoredSample::benign(1.0),
            ScoredSample::benign(0.9),
            ScoredSample::perturbed(0.0),
            ScoredSample::perturbed(0.1),
        ];
        assert_eq!(ada(&perfect, 0.5), 1.0);

        let all_same = vec![
            ScoredSample::benign(0.4),
            ScoredSample::perturbed(0.4),
            ScoredSample::benign(0.4),
            ScoredSample::perturbed(0.4),
        ];
        for tau in [0.0, 0.25, 0.4, 0.7, 1.0] {
            assert_eq!(ada(&all_same, tau), 0.5);
        }
    }

    #[test]
    fn ada_hand_counted_case() {
        // tau = 0.5: benign 0.6 correct, benign 0.3 wrong, perturbed 0.2
        // correct, perturbed 0.7 wrong -> 2/4.
        let samples = vec![
            ScoredSample::benign(0.6),
            ScoredSample::benign(0.3),
            ScoredSample::perturbed(0.2),
            ScoredSample::perturbed(0.7),
        ];
        assert_eq!(ada(&samples, 0.5), 0.5);
    }

    #[test]
    fn tau_zero_marks_everything_benign() {
        let samples = vec![
            ScoredSample::benign(0.0),
            ScoredSample::benign(0.2),
            ScoredSample::perturbed(0.0),
        ];
        // d >= 0 always holds, so exactly the benign fraction is correct.
        assert!((ada(&samples, 0.0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ada_star_matches_brute_force_grid_loop() {
        let mut rng_state = 77u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (rng_state >> 33) as f64 / (1u64 << 31) as f64
        };
        for _ in 0..20 {
            let samples: Vec<ScoredSample> = (0..20)
                .map(|i| ScoredSample {
                    d: (next() * 8.0).round() / 8.0,
                    perturbed: i % 2 == 0,
                })
                .collect();
            let mut best = f64::NEG_INFINITY;
            for i in 0..ADA_GRID_POINTS {
                let tau = i as f64 / (ADA_GRID_POINTS - 1) as f64;
                best = best.max(ada(&samples, tau));
            }
            assert_eq!(ada_star(&samples), best);
        }
    }

    #[test]
    fn ada_star_separable_and_degenerate_bounds() {
        let separable = vec![
            ScoredSample::benign(0.8),
            ScoredSample::benign(0.9),
            ScoredSample::perturbed(0.1),
            ScoredSample::perturbed(0.2),
        ];
        assert_eq!(ada_star(&separable), 1.0);
        // Balanced classes never fall below 0.5 (tau = 0 classifies all
        // images as benign).
        let knotted = interleaved(10);
        assert!(ada_star(&knotted) >= 0.5);
    }

    #[test]
    fn auroc_endpoints_and_rejection() {
        let separated = vec![
            ScoredSample::benign(0.9),
            ScoredSample::perturbed(0.1),
            ScoredSample::benign(0.8),
            ScoredSample::perturbed(0.2),
        ];
        assert_eq!(auroc(&separated).unwrap(), 1.0);

        let ties = vec![
            ScoredSample::benign(0.5),
            ScoredSample::perturbed(0.5),
            ScoredSample::benign(0.5),
            ScoredSample::perturbed(0.5),
        ];
        assert_eq!(auroc(&ties).unwrap(), 0.5);

        assert!(auroc(&[ScoredSample::benign(0.4)]).is_err());
    }

    /// Trapezoidal integration of the ROC curve, with the half-weight tie
    /// convention, as an independent oracle for the pair-counting AuROC.
    pub fn auroc_trapezoid(samples: &[ScoredSample]) -> f64 {
        let mut thresholds: Vec<f64> = samples.iter().map(|s| s.d).collect();
        thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        thresholds.dedup();
        let n_pos = samples.iter().filter(|s| s.perturbed).count() as f64;
        let n_neg = samples.len() as f64 - n_pos;
        // Sweep tau upward: positives are flagged when d < tau. Walk the
        // unique score levels, accumulating (FPR, TPR) points.
        let mut points = vec![(0.0f64, 0.0f64)];
        let mut tp = 0u64;
        let mut fp = 0u64;
        for &level in &thresholds {
            tp += samples.iter().filter(|s| s.perturbed && s.d == level).count() as u64;
            fp += samples.iter().filter(|s| !s.perturbed && s.d == level).count() as u64;
            points.push((fp as f64 / n_neg, tp as f64 / n_pos));
        }
        let mut area = 0.0;
        for pair in points.windows(2) {
            let (x0, y0) = pair[0];
            let (x1, y1) = pair[1];
            area += (x1 - x0) * (y0 + y1) / 2.0;
        }
        area
    }

    #[test]
    fn pair_counting_equals_trapezoid_with_ties() {
        let mut state = 99u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 33) as f64 / (1u64 << 31) as f64
        };
        for round in 0..50 {
            let samples: Vec<ScoredSample> = (0..30)
                .map(|i| ScoredSample {
                    // Quantized scores to force ties.
                    d: (next() * 6.0).round() / 6.0,
                    perturbed: i % 3 != 0,
                })
                .collect();
            let pairs = auroc(&samples).unwrap();
            let trap = auroc_trapezoid(&samples);
            assert!((pairs - trap).abs() <= 1e-12, "round {round}: {pairs} vs {trap}");
        }
    }

    #[test]
    fn tpr_at_fpr_cases() {
        let perfect = vec![
            ScoredSample::benign(1.0),
            ScoredSample::benign(0.9),
            ScoredSample::perturbed(0.0),
            ScoredSample::perturbed(0.1),
        ];
        assert_eq!(tpr_at_fpr(&perfect, 0.05).unwrap(), 1.0);

        let tied: Vec<ScoredSample> = (0..10)
            .map(|i| ScoredSample {
                d: 0.5,
                perturbed: i % 2 == 0,
            })
            .collect();
        assert_eq!(tpr_at_fpr(&tied, 0.05).unwrap(), 0.0);

        // Class-independent scores: TPR at 5% stays near 5%.
        let null = interleaved(2000);
        let tpr = tpr_at_fpr(&null, 0.05).unwrap();
        assert!((tpr - 0.05).abs() <= 0.03, "null TPR {tpr}");
    }

    #[test]
    fn metrics_invariant_under_strictly_increasing_transform() {
        let samples = interleaved(40);
        let transformed: Vec<ScoredSample> = samples
            .iter()
            .map(|s| ScoredSample {
                d: (s.d * 3.0 + 0.1).tanh(),
                perturbed: s.perturbed,
            })
            .collect();
        assert!((auroc(&samples).unwrap() - auroc(&transformed).unwrap()).abs() < 1e-12);
        assert!(
            (tpr_at_fpr(&samples, 0.05).unwrap() - tpr_at_fpr(&transformed, 0.05).unwrap()).abs()
                < 1e-12
        );
        // Score reversal with swapped classes preserves AuROC.
        let reversed: Vec<ScoredSample> = samples
            .iter()
            .map(|s| ScoredSample {
                d: -s.d,
                perturbed: !s.perturbed,
            })
            .collect();
        assert!((auroc(&samples).unwrap() - auroc(&reversed).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn fold_assignment_is_a_partition() {
        let assignment = assign_folds(23, 5, 3).unwrap();
        assert_eq!(assignment.len(), 23);
        let mut counts = vec![0usize; 5];
        for &f in &assignment {
            counts[f] += 1;
        }
        assert!(counts.iter().all(|&c| c == 4 || c == 5));
        assert!(assign_folds(3, 5, 0).is_err());
        assert!(assign_folds(10, 1, 0).is_err());
    }

    #[test]
    fn two_fold_cv_scores_each_sample_once() {
        let mut seen: Vec<usize> = Vec::new();
        let summary = cross_validate(4, 2, 9, |fit, eval| {
            assert_eq!(fit.len(), 2);
            assert_eq!(eval.len(), 2);
            seen.extend_from_slice(eval);
            Ok(eval
                .iter()
                .flat_map(|&i| {
                    [
                        ScoredSample::benign(0.8 + i as f64 * 0.01),
                        ScoredSample::perturbed(0.2 - i as f64 * 0.01),
                    ]
                })
                .collect())
        })
        .unwrap();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3]);
        assert_eq!(summary.folds.len(), 2);
        assert_eq!(summary.ada_star().0, 1.0);
    }

    fn synthetic_data(name: &str, entropies: &[f64]) -> DetectorData {
        use crate::tensor::Tensor;
        use crate::uncertainty::HeatmapKind;
        let features: Vec<UncertaintyFeatures> = entropies
            .iter()
            .map(|&e| UncertaintyFeatures {
                mean_entropy: e,
                mean_variation_ratio: e * 0.8,
                mean_margin: 1.0 - e,
                class_mean_probs: vec![0.25, 0.25, 0.25, 0.25],
            })
            .collect();
        let entropy_maps: Vec<Heatmap> = entropies
            .iter()
            .map(|&e| Heatmap {
                kind: HeatmapKind::Entropy,
                values: Tensor::filled(&[4, 4], e.clamp(0.0, 1.0)),
            })
            .collect();
        DetectorData {
            name: name.into(),
            features,
            entropy_maps,
        }
    }

    #[test]
    fn detector_grid_shares_folds_and_records_access() {
        let n = 12;
        let benign = synthetic_data("benign", &(0..n).map(|i| 0.1 + 0.01 * i as f64).collect::<Vec<_>>());
        let fit_adv = synthetic_data("fit_eps2", &(0..n).map(|i| 0.6 + 0.01 * i as f64).collect::<Vec<_>>());
        let strong = synthetic_data("strong", &(0..n).map(|i| 0.8 + 0.01 * i as f64).collect::<Vec<_>>());
        let weak = synthetic_data("weak", &(0..n).map(|i| 0.15 + 0.01 * i as f64).collect::<Vec<_>>());

        let mut access = Vec::new();
        let cells = cross_validate_detector(
            &DetectorSpec::Entropy,
            &benign,
            Some(&fit_adv),
            &[&strong, &weak],
            3,
            11,
            &mut access,
        )
        .unwrap();
        assert_eq!(cells.len(), 2);
        assert_eq!(cells[0].attack, "strong");
        assert_eq!(cells[0].summary.folds.len(), 3);
        // Identical fold assignment across catalogs.
        assert_eq!(cells[0].summary.fold_assignment, cells[1].summary.fold_assignment);
        // The well-separated catalog is detected nearly perfectly and far
        // better than the overlapping one.
        assert!(cells[0].summary.ada_star().0 >= 0.9);
        assert!(cells[0].summary.ada_star().0 > cells[1].summary.ada_star().0);
        // Unsupervised fit never reads the fitting catalog.
        assert!(access
            .iter()
            .all(|r| !(r.purpose == AccessPurpose::Fit && r.set_name == "fit_eps2")));

        // Supervised detector: fit access to the fitting catalog is logged,
        // and no other adversarial set is read during fit.
        let mut access = Vec::new();
        let cells = cross_validate_detector(
            &DetectorSpec::CrossA { lambda: 0.01 },
            &benign,
            Some(&fit_adv),
            &[&strong, &weak],
            3,
            11,
            &mut access,
        )
        .unwrap();
        assert_eq!(cells.len(), 2);
        let fit_reads: Vec<&str> = access
            .iter()
            .filter(|r| r.purpose == AccessPurpose::Fit)
            .map(|r| r.set_name.as_str())
            .collect();
        assert_eq!(fit_reads, vec!["benign", "fit_eps2"]);

        // Supervised without a fitting catalog is a configuration error.
        assert!(cross_validate_detector(
            &DetectorSpec::CrossA { lambda: 0.01 },
            &benign,
            None,
            &[&strong],
            3,
            11,
            &mut Vec::new(),
        )
        .is_err());
    }

    #[test]
    fn detector_grid_agrees_with_generic_cross_validate() {
        let n = 10;
        let benign = synthetic_data("benign", &(0..n).map(|i| 0.2 + 0.02 * i as f64).collect::<Vec<_>>());
        let eval = synthetic_data("attack", &(0..n).map(|i| 0.5 + 0.03 * i as f64).collect::<Vec<_>>());
        let seed = 23;
        let cells = cross_validate_detector(
            &DetectorSpec::Entropy,
            &benign,
            None,
            &[&eval],
            5,
            seed,
            &mut Vec::new(),
        )
        .unwrap();

        let replay = cross_validate(n, 5, seed, |fit, held_out| {
            let model = fit_entropy(&benign.subset_features(fit))?;
            let mut samples = Vec::new();
            for &i in held_out {
                samples.push(ScoredSample::benign(
                    model.score(&DetectorInput::Features(&benign.features[i]))?,
                ));
                samples.push(ScoredSample::perturbed(
                    model.score(&DetectorInput::Features(&eval.features[i]))?,
                ));
            }
            Ok(samples)
        })
        .unwrap();
        assert_eq!(cells[0].summary, replay);
    }

    #[test]
    fn cv_replay_oracle_reproduces_fold_metrics() {
        // Deterministic synthetic detector: score depends only on the index
        // parity, so a replay over the recorded assignment must match.
        let score = |i: usize| -> Vec<ScoredSample> {
            vec![
                ScoredSample::benign(0.5 + (i % 7) as f64 * 0.05),
                ScoredSample::perturbed(0.45 - (i % 5) as f64 * 0.05),
            ]
        };
        let summary = cross_validate(15, 5, 42, |_, eval| {
            Ok(eval.iter().flat_map(|&i| score(i)).collect())
        })
        .unwrap();

        for fold in 0..5 {
            let eval: Vec<usize> = (0..15)
                .filter(|&i| summary.fold_assignment[i] == fold)
                .collect();
            let samples: Vec<ScoredSample> = eval.iter().flat_map(|&i| score(i)).collect();
            assert_eq!(summary.folds[fold].ada_star, ada_star(&samples));
            assert_eq!(summary.folds[fold].auroc, auroc(&samples).unwrap());
            assert_eq!(
                summary.folds[fold].tpr5,
                tpr_at_fpr(&samples, 0.05).unwrap()
            );
        }
    }
}
