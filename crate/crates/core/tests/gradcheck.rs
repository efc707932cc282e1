//! Finite-difference oracles for the autodiff engine: analytic gradients of
//! every differentiable path must match central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segdetect::autodiff::Tape;
use segdetect::datagen::{self, SceneConfig, IMAGE_CHANNELS};
use segdetect::labelmap::LabelMap;
use segdetect::segnet::SegModel;
use segdetect::tensor::Tensor;

const FD_STEP: f64 = 1e-5;

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central finite difference of `loss` with respect to one coordinate of
/// `tensor`.
fn central_difference(
    tensor: &Tensor,
    coord: usize,
    loss: &dyn Fn(&Tensor) -> f64,
) -> f64 {
    let mut plus = tensor.clone();
    plus.data_mut()[coord] += FD_STEP;
    let mut minus = tensor.clone();
    minus.data_mut()[coord] -= FD_STEP;
    (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP)
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let input = random_tensor(&[5, 5, 2], &mut rng);
    let kernels = random_tensor(&[3, 3, 2, 4], &mut rng);
    let bias = random_tensor(&[4], &mut rng);
    // Scalar loss: fixed random weighting of the conv output.
    let out_len = 3 * 3 * 4;
    let weights: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let loss_for = |input: &Tensor, kernels: &Tensor, bias: &Tensor| -> f64 {
        let mut tape = Tape::new();
        let x = tape.input(input.clone(), false);
        let k = tape.input(kernels.clone(), false);
        let b = tape.input(bias.clone(), false);
        let out = tape.conv2d(x, k, b, 1, 0).unwrap();
        tape.value(out)
            .data()
            .iter()
            .zip(&weights)
            .map(|(&v, &w)| v * w)
            .sum()
    };

    // Analytic gradients through the tape.
    let mut tape = Tape::new();
    let x = tape.input(input.clone(), true);
    let k = tape.input(kernels.clone(), true);
    let b = tape.input(bias.clone(), true);
    let out = tape.conv2d(x, k, b, 1, 0).unwrap();
    let w = tape.input(Tensor::from_vec(&[3, 3, 4], weights.clone()).unwrap(), false);
    let weighted = tape.mul(out, w).unwrap();
    let loss = tape.sum(weighted);
    let grads = tape.backward(loss).unwrap();

    for coord in 0..input.len() {
        let fd = central_difference(&input, coord, &|t| loss_for(t, &kernels, &bias));
        let an = grads.wrt(x).data()[coord];
        assert!(rel_error(an, fd) <= 1e-6, "input[{coord}]: {an} vs {fd}");
    }
    for coord in 0..kernels.len() {
        let fd = central_difference(&kernels, coord, &|t| loss_for(&input, t, &bias));
        let an = grads.wrt(k).data()[coord];
        assert!(rel_error(an, fd) <= 1e-6, "kernels[{coord}]: {an} vs {fd}");
    }
    for coord in 0..bias.len() {
        let fd = central_difference(&bias, coord, &|t| loss_for(&input, &kernels, t));
        let an = grads.wrt(b).data()[coord];
        assert!(rel_error(an, fd) <= 1e-6, "bias[{coord}]: {an} vs {fd}");
    }
}

#[test]
fn relu_gradient_matches_finite_differences_away_from_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let input = random_tensor(&[40], &mut rng);
    let weights: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let loss_for = |t: &Tensor| -> f64 {
        let mut tape = Tape::new();
        let x = tape.input(t.clone(), false);
        let y = tape.relu(x);
        tape.value(y)
            .data()
            .iter()
            .zip(&weights)
            .map(|(&v, &w)| v * w)
            .sum()
    };

    let mut tape = Tape::new();
    let x = tape.input(input.clone(), true);
    let y = tape.relu(x);
    let w = tape.input(Tensor::from_vec(&[40], weights.clone()).unwrap(), false);
    let weighted = tape.mul(y, w).unwrap();
    let loss = tape.sum(weighted);
    let grads = tape.backward(loss).unwrap();

    for coord in 0..input.len() {
        if input.data()[coord].abs() < 1e-3 {
            continue; // skip the kink neighborhood
        }
        let fd = central_difference(&input, coord, &loss_for);
        let an = grads.wrt(x).data()[coord];
        assert!(rel_error(an, fd) <= 1e-6, "relu[{coord}]: {an} vs {fd}");
    }
}

#[test]
fn full_network_gradients_match_finite_differences() {
    // Input and weight gradients of the complete conv-relu-softmax-cross
    // entropy chain, checked on over 100 sampled coordinates.
    let started = std::time::Instant::now();
    let config = SceneConfig {
        height: 8,
        width: 8,
        num_classes: 3,
        shapes_min: 1,
        shapes_max: 2,
        noise_std: 0.05,
        seed: 13,
    };
    let item = datagen::generate_image(&config, 0);
    let model = SegModel::with_hidden_channels(&[4, 6], 3, IMAGE_CHANNELS, 77);

    let loss_for = |image: &Tensor, model: &SegModel, labels: &LabelMap| -> f64 {
        let mut tape = Tape::new();
        let x = tape.input(image.clone(), false);
        let fwd = model.forward_on_tape(&mut tape, x, false).unwrap();
        let probs = tape.pixel_softmax(fwd.logits).unwrap();
        let loss = tape.cross_entropy(probs, labels).unwrap();
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let x = tape.input(item.image.clone(), true);
    let fwd = model.forward_on_tape(&mut tape, x, true).unwrap();
    let probs = tape.pixel_softmax(fwd.logits).unwrap();
    let loss = tape.cross_entropy(probs, &item.labels).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut checked = 0usize;

    // Input coordinates.
    for _ in 0..60 {
        let coord = rng.gen_range(0..item.image.len());
        let fd = central_difference(&item.image, coord, &|t| loss_for(t, &model, &item.labels));
        let an = grads.wrt(x).data()[coord];
        if an.abs().max(fd.abs()) < 1e-10 {
            continue; // dead coordinate under a ReLU; nothing to compare
        }
        assert!(
            rel_error(an, fd) <= 1e-4,
            "input[{coord}]: analytic {an} vs fd {fd}"
        );
        checked += 1;
    }

    // Weight and bias coordinates of every layer.
    for (layer_idx, &(kvar, bvar)) in fwd.layer_vars.iter().enumerate() {
        let layer = &model.layers()[layer_idx];
        for _ in 0..20 {
            let coord = rng.gen_range(0..layer.kernels.len());
            let fd = central_difference(&layer.kernels, coord, &|t| {
                let mut perturbed = model.clone();
                perturbed.layers_mut()[layer_idx].kernels = t.clone();
                loss_for(&item.image, &perturbed, &item.labels)
            });
            let an = grads.wrt(kvar).data()[coord];
            if an.abs().max(fd.abs()) < 1e-10 {
                continue;
            }
            assert!(
                rel_error(an, fd) <= 1e-4,
                "layer {layer_idx} kernels[{coord}]: {an} vs {fd}"
            );
            checked += 1;
        }
        for coord in 0..layer.bias.len().min(4) {
            let fd = central_difference(&layer.bias, coord, &|t| {
                let mut perturbed = model.clone();
                perturbed.layers_mut()[layer_idx].bias = t.clone();
                loss_for(&item.image, &perturbed, &item.labels)
            });
            let an = grads.wrt(bvar).data()[coord];
            if an.abs().max(fd.abs()) < 1e-10 {
                continue;
            }
            assert!(
                rel_error(an, fd) <= 1e-4,
                "layer {layer_idx} bias[{coord}]: {an} vs {fd}"
            );
            checked += 1;
        }
    }
    assert!(checked >= 100, "only {checked} coordinates were comparable");
    assert!(
        started.elapsed().as_secs() < 60,
        "gradient check exceeded its runtime budget"
    );
}
