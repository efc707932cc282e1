//! Behavior of the attacks against a small trained checkpoint: directional
//! sanity of the single-step attack, near-noop self-targeting, active-set
//! shrinkage of the dense targeted attack, and budget soundness across the
//! whole suite.

use std::sync::LazyLock;

use segdetect::attacks::{
    dag_attack, fgsm, fgsm_targeted, ifgsm, least_likely_target, pgd, AttackConfig, TargetSource,
};
use segdetect::autodiff::kernels;
use segdetect::datagen::{self, LabeledImage, SceneConfig, IMAGE_CHANNELS};
use segdetect::labelmap::LabelMap;
use segdetect::metrics::apsr;
use segdetect::segnet::{self, predict_labels, SegModel, TrainConfig};

struct Fixture {
    model: SegModel,
    data: Vec<LabeledImage>,
}

fn scene_config() -> SceneConfig {
    SceneConfig {
        height: 16,
        width: 16,
        num_classes: 4,
        shapes_min: 1,
        shapes_max: 3,
        noise_std: 0.04,
        seed: 19,
    }
}

static FIXTURE: LazyLock<Fixture> = LazyLock::new(|| {
    let config = scene_config();
    let data = datagen::generate_dataset(&config, 24).unwrap();
    let train_config = TrainConfig {
        epochs: 16,
        batch_size: 4,
        learning_rate: 0.12,
        momentum: 0.9,
        weight_seed: 3,
    };
    let mut model = SegModel::with_hidden_channels(&[8, 12], 4, IMAGE_CHANNELS, 3);
    segnet::train_existing(&mut model, &data[..16], &data[16..20], &train_config).unwrap();
    Fixture { model, data }
});

fn target_loss(model: &SegModel, image: &segdetect::tensor::Tensor, labels: &LabelMap) -> f64 {
    kernels::cross_entropy_forward(model.predict_probs(image).unwrap().tensor(), labels, None)
        .unwrap()
}

#[test]
fn single_step_attack_does_not_decrease_the_loss_at_small_epsilon() {
    let fx = &*FIXTURE;
    for item in &fx.data[20..24] {
        let config = AttackConfig::untargeted(1.0);
        let adv = fgsm(&fx.model, &item.image, &item.labels, &config).unwrap();
        let before = target_loss(&fx.model, &item.image, &item.labels);
        let after = target_loss(&fx.model, &adv.image, &item.labels);
        assert!(
            after - before >= -1e-6,
            "loss decreased: {before} -> {after}"
        );
    }
}

#[test]
fn self_targeted_attack_barely_changes_the_prediction() {
    let fx = &*FIXTURE;
    for item in &fx.data[20..23] {
        let probs = fx.model.predict_probs(&item.image).unwrap();
        let prediction = predict_labels(&probs);
        let mut config = AttackConfig::targeted(1.0, TargetSource::StaticMask);
        config.iterations = Some(1);
        let adv = fgsm_targeted(&fx.model, &item.image, &prediction, &config).unwrap();
        let before = apsr(&prediction, &item.labels).unwrap();
        let adv_pred = predict_labels(&fx.model.predict_probs(&adv.image).unwrap());
        let after = apsr(&adv_pred, &item.labels).unwrap();
        assert!(
            (after - before).abs() <= 0.05,
            "self-target shifted APSR {before} -> {after}"
        );
    }
}

#[test]
fn iterative_least_likely_attack_beats_its_single_step_form() {
    let fx = &*FIXTURE;
    let item = &fx.data[21];
    let probs = fx.model.predict_probs(&item.image).unwrap();
    let target = least_likely_target(&probs);

    let single = fgsm_targeted(
        &fx.model,
        &item.image,
        &target,
        &AttackConfig::targeted(8.0, TargetSource::LeastLikely),
    )
    .unwrap();
    let iterative = ifgsm(
        &fx.model,
        &item.image,
        &target,
        &AttackConfig::targeted(8.0, TargetSource::LeastLikely),
    )
    .unwrap();
    let loss_single = target_loss(&fx.model, &single.image, &target);
    let loss_iterative = target_loss(&fx.model, &iterative.image, &target);
    assert!(
        loss_iterative <= loss_single + 1e-9,
        "iterative {loss_iterative} vs single {loss_single}"
    );
}

#[test]
fn dag_active_set_is_mostly_non_increasing() {
    let fx = &*FIXTURE;
    // Remap the reference labels so that the target disagrees with most of
    // the initial prediction and the attack has pixels to work on.
    let base = &fx.data[0].labels;
    let mut remapped = base.clone();
    for row in 0..base.height() {
        for col in 0..base.width() {
            remapped.set(row, col, (base.get(row, col) + 2) % 4);
        }
    }
    let mut shrinking_steps = 0usize;
    let mut total_steps = 0usize;
    for item in &fx.data[20..24] {
        let mut config = AttackConfig::targeted(8.0, TargetSource::StaticMask);
        config.alpha = 2.0;
        config.iterations = Some(12);
        let outcome = dag_attack(&fx.model, &item.image, &remapped, &config).unwrap();
        for pair in outcome.active_history.windows(2) {
            total_steps += 1;
            if pair[1] <= pair[0] {
                shrinking_steps += 1;
            }
        }
    }
    assert!(total_steps > 0);
    let fraction = shrinking_steps as f64 / total_steps as f64;
    assert!(
        fraction >= 0.8,
        "active set shrank on only {fraction:.2} of steps"
    );
}

#[test]
fn every_attack_respects_budget_and_range() {
    let fx = &*FIXTURE;
    let item = &fx.data[22];
    let probs = fx.model.predict_probs(&item.image).unwrap();
    let ll = least_likely_target(&probs);
    let static_map = fx.data[0].labels.clone();

    for eps in [2.0, 8.0, 16.0] {
        let untargeted = AttackConfig::untargeted(eps);
        let targeted = AttackConfig::targeted(eps, TargetSource::LeastLikely);
        let examples = vec![
            fgsm(&fx.model, &item.image, &item.labels, &untargeted).unwrap(),
            fgsm_targeted(&fx.model, &item.image, &ll, &targeted).unwrap(),
            ifgsm(&fx.model, &item.image, &item.labels, &untargeted).unwrap(),
            pgd(&fx.model, &item.image, &item.labels, &untargeted).unwrap(),
            dag_attack(&fx.model, &item.image, &static_map, &targeted)
                .unwrap()
                .example,
        ];
        for example in examples {
            example.check_budget(&item.image, eps).unwrap();
        }
    }
}
