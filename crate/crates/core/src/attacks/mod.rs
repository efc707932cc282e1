//! Adversarial example generation.
//!
//! Budgets are expressed in 1/255 intensity units and mapped into the [0, 1]
//! model space, so `epsilon = 8` means an l-infinity ball of radius 8/255.
//! Every produced example satisfies the ball constraint and stays inside the
//! valid pixel range.

pub mod suite;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{CoreError, Result};
use crate::field::SoftmaxField;
use crate::labelmap::LabelMap;
use crate::segnet::{predict_labels, SegModel};
use crate::tensor::Tensor;

pub use suite::{apply_attack_suite, AttackCatalog, AttackGroup, AttackKind, SuiteAttackSpec, SuiteConfig};

/// Slack allowed on the ball constraint when validating examples.
pub const BUDGET_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Untargeted,
    Targeted,
}

/// Where a targeted attack takes its target label map from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    None,
    LeastLikely,
    StaticMask,
    DeleteClass(u8),
}

/// Which labels an untargeted attack differentiates against. The ground
/// truth is the default; the model's own prediction is available as a
/// switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    GroundTruth,
    ModelPrediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Perturbation budget in 1/255 units.
    pub epsilon: f64,
    /// Step size in 1/255 units.
    pub alpha: f64,
    /// Iteration count for iterative attacks; when unset the Kurakin rule
    /// n = min(eps + 4, floor(1.25 eps)) applies.
    pub iterations: Option<usize>,
    pub mode: AttackMode,
    pub target_source: TargetSource,
    pub label_source: LabelSource,
}

impl AttackConfig {
    pub fn untargeted(epsilon: f64) -> AttackConfig {
        AttackConfig {
            epsilon,
            alpha: 1.0,
            iterations: None,
            mode: AttackMode::Untargeted,
            target_source: TargetSource::None,
            label_source: LabelSource::GroundTruth,
        }
    }

    pub fn targeted(epsilon: f64, target_source: TargetSource) -> AttackConfig {
        AttackConfig {
            epsilon,
            alpha: 1.0,
            iterations: None,
            mode: AttackMode::Targeted,
            target_source,
            label_source: LabelSource::GroundTruth,
        }
    }

    /// n = min(eps + 4, floor(1.25 eps)), clamped to at least one step.
    pub fn default_iterations(epsilon: f64) -> usize {
        let a = epsilon + 4.0;
        let b = (1.25 * epsilon).floor();
        (a.min(b).max(1.0)) as usize
    }

    pub fn iterations(&self) -> usize {
        self.iterations
            .unwrap_or_else(|| AttackConfig::default_iterations(self.epsilon))
    }

    /// Budget mapped into model space.
    pub fn epsilon_model(&self) -> f64 {
        self.epsilon / 255.0
    }

    /// Step size mapped into model space.
    pub fn alpha_model(&self) -> f64 {
        self.alpha / 255.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(CoreError::InvalidArgument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(CoreError::InvalidArgument(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.iterations() < 1 {
            return Err(CoreError::InvalidArgument("iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// A perturbed image together with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialExample {
    pub image: Tensor,
    pub source_index: usize,
    pub attack_name: String,
    /// Realized l-infinity distance to the benign image.
    pub linf_distance: f64,
}

impl AdversarialExample {
    fn from_perturbed(
        perturbed: Tensor,
        benign: &Tensor,
        source_index: usize,
        attack_name: &str,
    ) -> AdversarialExample {
        let linf = linf_distance(&perturbed, benign);
        AdversarialExample {
            image: perturbed,
            source_index,
            attack_name: attack_name.to_string(),
            linf_distance: linf,
        }
    }

    /// Checks the ball constraint and pixel range against the benign image.
    pub fn check_budget(&self, benign: &Tensor, epsilon: f64) -> Result<()> {
        let linf = linf_distance(&self.image, benign);
        if linf > epsilon / 255.0 + BUDGET_TOLERANCE {
            return Err(CoreError::Numeric(format!(
                "budget violated: linf {linf} > {}",
                epsilon / 255.0
            )));
        }
        if self.image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(CoreError::Numeric("pixel outside [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn linf_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clips each pixel to the epsilon ball around the benign image and to the
/// valid range [0, 1].
fn clip_to_ball(perturbed: &mut Tensor, benign: &Tensor, eps_model: f64) {
    for (v, &x) in perturbed.data_mut().iter_mut().zip(benign.data()) {
        *v = v.clamp(x - eps_model, x + eps_model).clamp(0.0, 1.0);
    }
}

/// Loss, input gradient, and softmax field at one point, with the loss
/// optionally restricted to masked pixels.
fn loss_and_input_gradient(
    model: &SegModel,
    image: &Tensor,
    labels: &LabelMap,
    mask: Option<&[bool]>,
) -> Result<(f64, Tensor, SoftmaxField)> {
    let mut tape = Tape::new();
    let x = tape.input(image.clone(), true);
    let fwd = model.forward_on_tape(&mut tape, x, false)?;
    let probs = tape.pixel_softmax(fwd.logits)?;
    let loss = tape.cross_entropy_masked(probs, labels, mask)?;
    let loss_value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let grad = grads.wrt(x).clone();
    let field = tape.softmax_field(probs);
    Ok((loss_value, grad, field))
}

/// Resolves the label map an untargeted attack differentiates against.
fn untargeted_labels(
    model: &SegModel,
    image: &Tensor,
    ground_truth: &LabelMap,
    source: LabelSource,
) -> Result<LabelMap> {
    match source {
        LabelSource::GroundTruth => Ok(ground_truth.clone()),
        LabelSource::ModelPrediction => {
            let probs = model.predict_probs(image)?;
            Ok(predict_labels(&probs))
        }
    }
}

/// Single-step fast gradient sign attack: ascend the pixel loss by
/// epsilon * sign(grad) and clamp back into the pixel range.
pub fn fgsm(
    model: &SegModel,
    image: &Tensor,
    labels: &LabelMap,
    config: &AttackConfig,
) -> Result<AdversarialExample> {
    config.validate()?;
    let labels = untargeted_labels(model, image, labels, config.label_source)?;
    let (_, grad, _) = loss_and_input_gradient(model, image, &labels, None)?;
    let eps = config.epsilon_model();
    let data = image
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| (x + eps * sign(g)).clamp(0.0, 1.0))
        .collect();
    let perturbed = Tensor::from_vec(image.shape(), data)?;
    Ok(AdversarialExample::from_perturbed(perturbed, image, 0, "fgsm"))
}

/// Targeted fast gradient sign attack: descend the loss toward the target
/// labels (the sign-mirrored form of the untargeted step).
pub fn fgsm_targeted(
    model: &SegModel,
    image: &Tensor,
    target: &LabelMap,
    config: &AttackConfig,
) -> Result<AdversarialExample> {
    config.validate()?;
    let (_, grad, _) = loss_and_input_gradient(model, image, target, None)?;
    let eps = config.epsilon_model();
    let data = image
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| (x - eps * sign(g)).clamp(0.0, 1.0))
        .collect();
    let perturbed = Tensor::from_vec(image.shape(), data)?;
    Ok(AdversarialExample::from_perturbed(
        perturbed,
        image,
        0,
        "fgsm_targeted",
    ))
}

/// Per-pixel argmin of the predicted distribution; ties go to the lowest
/// class index.
pub fn least_likely_target(probs: &SoftmaxField) -> LabelMap {
    let mut target = LabelMap::filled(probs.height(), probs.width(), 0);
    for row in 0..probs.height() {
        for col in 0..probs.width() {
            let pixel = probs.pixel(row, col);
            let mut worst = 0usize;
            for (idx, &p) in pixel.iter().enumerate() {
                if p < pixel[worst] {
                    worst = idx;
                }
            }
            target.set(row, col, worst as u8);
        }
    }
    target
}

/// Iterative FGSM: n signed-gradient steps of size alpha, each clipped to
/// the epsilon ball and the pixel range. The targeted variant negates the
/// step direction.
pub fn ifgsm(
    model: &SegModel,
    image: &Tensor,
    labels_or_target: &LabelMap,
    config: &AttackConfig,
) -> Result<AdversarialExample> {
    config.validate()?;
    let labels = match config.mode {
        AttackMode::Untargeted => {
            untargeted_labels(model, image, labels_or_target, config.label_source)?
        }
        AttackMode::Targeted => labels_or_target.clone(),
    };
    let direction = match config.mode {
        AttackMode::Untargeted => 1.0,
        AttackMode::Targeted => -1.0,
    };
    let eps = config.epsilon_model();
    let alpha = config.alpha_model();
    let mut current = image.clone();
    for _ in 0..config.iterations() {
        let (_, grad, _) = loss_and_input_gradient(model, &current, &labels, None)?;
        for (v, &g) in current.data_mut().iter_mut().zip(grad.data()) {
            *v += direction * alpha * sign(g);
        }
        clip_to_ball(&mut current, image, eps);
        debug_assert!(linf_distance(&current, image) <= eps + BUDGET_TOLERANCE);
    }
    Ok(AdversarialExample::from_perturbed(current, image, 0, "ifgsm"))
}

/// Projected gradient descent: steps along the raw gradient normalized by
/// its l-infinity norm, projected onto the epsilon ball after each step.
/// Zero-gradient steps are skipped.
pub fn pgd(
    model: &SegModel,
    image: &Tensor,
    labels_or_target: &LabelMap,
    config: &AttackConfig,
) -> Result<AdversarialExample> {
    config.validate()?;
    let labels = match config.mode {
        AttackMode::Untargeted => {
            untargeted_labels(model, image, labels_or_target, config.label_source)?
        }
        AttackMode::Targeted => labels_or_target.clone(),
    };
    let direction = match config.mode {
        AttackMode::Untargeted => 1.0,
        AttackMode::Targeted => -1.0,
    };
    let eps = config.epsilon_model();
    let alpha = config.alpha_model();
    let mut current = image.clone();
    for _ in 0..config.iterations() {
        let (_, grad, _) = loss_and_input_gradient(model, &current, &labels, None)?;
        let ginf = grad.data().iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if ginf == 0.0 {
            continue;
        }
        for (v, &g) in current.data_mut().iter_mut().zip(grad.data()) {
            *v += direction * alpha * g / ginf;
        }
        clip_to_ball(&mut current, image, eps);
        debug_assert!(linf_distance(&current, image) <= eps + BUDGET_TOLERANCE);
    }
    Ok(AdversarialExample::from_perturbed(current, image, 0, "pgd"))
}

/// Reuses one reference label map (taken from a designated training image)
/// as the shared target for every attacked image.
pub fn static_target(reference: &LabelMap, height: usize, width: usize) -> Result<LabelMap> {
    if reference.height() != height || reference.width() != width {
        return Err(CoreError::shape_mismatch(
            "static target vs attacked image",
            &[reference.height(), reference.width()],
            &[height, width],
        ));
    }
    Ok(reference.clone())
}

/// Class-deletion target: pixels of the deleted class are reassigned to the
/// class of the spatially nearest pixel (Euclidean distance, ties broken by
/// donor scan order) that is not predicted as the deleted class.
pub fn dnnm_target(prediction: &LabelMap, delete_class: u8) -> Result<LabelMap> {
    let (h, w) = (prediction.height(), prediction.width());
    let deleted: Vec<usize> = prediction
        .ids()
        .iter()
        .enumerate()
        .filter(|(_, &id)| id == delete_class)
        .map(|(z, _)| z)
        .collect();
    if deleted.is_empty() {
        return Ok(prediction.clone());
    }
    if deleted.len() == prediction.len() {
        return Err(CoreError::InvalidArgument(format!(
            "prediction is entirely class {delete_class}; no donor pixels"
        )));
    }

    // Offsets sorted by squared distance, then (drow, dcol): for a fixed
    // pixel this visits donors in exactly the brute-force tie order.
    let mut offsets: Vec<(i64, i64, i64)> = Vec::with_capacity(4 * h * w);
    for drow in -(h as i64 - 1)..h as i64 {
        for dcol in -(w as i64 - 1)..w as i64 {
            offsets.push((drow * drow + dcol * dcol, drow, dcol));
        }
    }
    offsets.sort();

    let mut target = prediction.clone();
    for &z in &deleted {
        let row = (z / w) as i64;
        let col = (z % w) as i64;
        for &(_, drow, dcol) in &offsets {
            let r = row + drow;
            let c = col + dcol;
            if r < 0 || r >= h as i64 || c < 0 || c >= w as i64 {
                continue;
            }
            let donor = prediction.get(r as usize, c as usize);
            if donor != delete_class {
                target.set(z / w, z % w, donor);
                break;
            }
        }
    }
    Ok(target)
}

/// Target specification for the universal perturbation: one shared map, or
/// one map per training image (used for class-deletion noise).
#[derive(Debug, Clone)]
pub enum UniversalTarget {
    Shared(LabelMap),
    PerImage(Vec<LabelMap>),
}

impl UniversalTarget {
    fn get(&self, index: usize) -> &LabelMap {
        match self {
            UniversalTarget::Shared(map) => map,
            UniversalTarget::PerImage(maps) => &maps[index],
        }
    }

    fn check(&self, count: usize) -> Result<()> {
        if let UniversalTarget::PerImage(maps) = self {
            if maps.len() != count {
                return Err(CoreError::InvalidArgument(format!(
                    "{} per-image targets for {count} images",
                    maps.len()
                )));
            }
        }
        Ok(())
    }
}

/// Fits a single universal noise tensor by targeted signed-gradient steps on
/// the mean target loss over mini-batches, projecting onto the epsilon ball
/// after every step. Updates run sequentially.
pub fn universal_perturbation(
    model: &SegModel,
    train_images: &[Tensor],
    target: &UniversalTarget,
    config: &AttackConfig,
    batch_size: usize,
) -> Result<Tensor> {
    config.validate()?;
    if train_images.is_empty() {
        return Err(CoreError::InvalidArgument(
            "universal perturbation needs a non-empty training subset".into(),
        ));
    }
    target.check(train_images.len())?;
    let batch_size = batch_size.max(1);
    let eps = config.epsilon_model();
    let alpha = config.alpha_model();
    let mut noise = Tensor::zeros(train_images[0].shape());

    let mut cursor = 0usize;
    for _ in 0..config.iterations() {
        let mut grad_sum = vec![0.0f64; noise.len()];
        let mut used = 0usize;
        for _ in 0..batch_size {
            let idx = cursor % train_images.len();
            cursor += 1;
            let image = &train_images[idx];
            if image.shape() != noise.shape() {
                return Err(CoreError::shape_mismatch(
                    "universal noise vs training image",
                    noise.shape(),
                    image.shape(),
                ));
            }
            let data = image
                .data()
                .iter()
                .zip(noise.data())
                .map(|(&x, &n)| (x + n).clamp(0.0, 1.0))
                .collect();
            let perturbed = Tensor::from_vec(image.shape(), data)?;
            let (_, grad, _) = loss_and_input_gradient(model, &perturbed, target.get(idx), None)?;
            for (s, &g) in grad_sum.iter_mut().zip(grad.data()) {
                *s += g;
            }
            used += 1;
        }
        for (n, s) in noise.data_mut().iter_mut().zip(&grad_sum) {
            *n = (*n - alpha * sign(s / used as f64)).clamp(-eps, eps);
        }
    }
    Ok(noise)
}

/// Applies a universal noise tensor to an image.
pub fn apply_universal(image: &Tensor, noise: &Tensor, source_index: usize) -> Result<AdversarialExample> {
    if image.shape() != noise.shape() {
        return Err(CoreError::shape_mismatch(
            "universal noise vs image",
            noise.shape(),
            image.shape(),
        ));
    }
    let data = image
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&x, &n)| (x + n).clamp(0.0, 1.0))
        .collect();
    let perturbed = Tensor::from_vec(image.shape(), data)?;
    Ok(AdversarialExample::from_perturbed(
        perturbed,
        image,
        source_index,
        "universal",
    ))
}

/// Outcome of the dense iterative targeted attack, including the active-set
/// trace (pixels still disagreeing with the target at each step).
#[derive(Debug, Clone)]
pub struct DagOutcome {
    pub example: AdversarialExample,
    pub active_history: Vec<usize>,
    pub iterations_run: usize,
}

/// Iterative targeted attack over the active set: at each step the loss is
/// restricted to pixels not yet predicting their target, a normalized
/// gradient step is taken, and the iterate is projected onto the epsilon
/// ball. Stops when more than half of all pixels match the target.
pub fn dag_attack(
    model: &SegModel,
    image: &Tensor,
    target: &LabelMap,
    config: &AttackConfig,
) -> Result<DagOutcome> {
    config.validate()?;
    let eps = config.epsilon_model();
    let alpha = config.alpha_model();
    let pixels = target.len();
    let mut current = image.clone();
    let mut history = Vec::new();
    let mut iterations_run = 0usize;

    let active_mask = |probs: &SoftmaxField| -> Vec<bool> {
        let predicted = predict_labels(probs);
        predicted
            .ids()
            .iter()
            .zip(target.ids())
            .map(|(&p, &t)| p != t)
            .collect()
    };

    let mut probs = model.predict_probs(&current)?;
    for _ in 0..config.iterations() {
        let mask = active_mask(&probs);
        let active = mask.iter().filter(|&&m| m).count();
        history.push(active);
        if active * 2 < pixels || active == 0 {
            break;
        }
        let (_, grad, _) = loss_and_input_gradient(model, &current, target, Some(&mask))?;
        let ginf = grad.data().iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if ginf == 0.0 {
            break;
        }
        for (v, &g) in current.data_mut().iter_mut().zip(grad.data()) {
            *v -= alpha * g / ginf;
        }
        clip_to_ball(&mut current, image, eps);
        debug_assert!(linf_distance(&current, image) <= eps + BUDGET_TOLERANCE);
        iterations_run += 1;
        probs = model.predict_probs(&current)?;
    }
    if history.is_empty() {
        history.push(active_mask(&probs).iter().filter(|&&m| m).count());
    }
    Ok(DagOutcome {
        example: AdversarialExample::from_perturbed(current, image, 0, "dag"),
        active_history: history,
        iterations_run,
    })
}
