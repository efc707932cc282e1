//! The toy segmentation network: same-padding conv blocks with a 1x1 logit
//! head, trained by mini-batch SGD with momentum on the pixel-wise cross
//! entropy. Checkpoints persist one SSTN1 container per weight tensor plus a
//! plain-text metadata sidecar.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tape, Var};
use crate::datagen::{LabeledImage, IMAGE_CHANNELS};
use crate::error::{CoreError, Result};
use crate::field::SoftmaxField;
use crate::labelmap::LabelMap;
use crate::tensor::{load_tensor, save_tensor, Tensor};

/// Hidden conv channels of the standard toy architecture; a 1x1 logit head
/// follows as the final conv layer.
pub const TOY_HIDDEN_CHANNELS: [usize; 3] = [16, 32, 32];

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernels: Tensor,
    pub bias: Tensor,
    pub padding: usize,
    pub relu: bool,
}

impl ConvLayer {
    fn kernel_size(&self) -> usize {
        self.kernels.shape()[0]
    }

    fn in_channels(&self) -> usize {
        self.kernels.shape()[2]
    }

    fn out_channels(&self) -> usize {
        self.kernels.shape()[3]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoreError::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CoreError::InvalidArgument("learning_rate must be positive".into()));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(CoreError::InvalidArgument("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 8,
            learning_rate: 0.08,
            momentum: 0.9,
            weight_seed: 11,
        }
    }
}

/// Pixel-wise classifier. Immutable once fitted; prediction is safe to run
/// concurrently from multiple threads.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    layers: Vec<ConvLayer>,
    num_classes: usize,
    in_channels: usize,
    weight_seed: u64,
    train_config: Option<TrainConfig>,
}

/// Tape handles for one recorded forward pass.
pub struct TapedForward {
    pub layer_vars: Vec<(Var, Var)>,
    pub logits: Var,
}

impl SegModel {
    /// The standard toy architecture for a given class count.
    pub fn new_toy(num_classes: usize, weight_seed: u64) -> SegModel {
        SegModel::with_hidden_channels(&TOY_HIDDEN_CHANNELS, num_classes, IMAGE_CHANNELS, weight_seed)
    }

    /// Builds the conv stack: 3x3 same-padding relu blocks over the listed
    /// hidden channel counts, then a 1x1 conv to `num_classes` logits.
    pub fn with_hidden_channels(
        hidden: &[usize],
        num_classes: usize,
        in_channels: usize,
        weight_seed: u64,
    ) -> SegModel {
        assert!(num_classes >= 2, "need at least two classes");
        let mut rng = ChaCha8Rng::seed_from_u64(weight_seed);
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut cin = in_channels;
        for &cout in hidden {
            layers.push(init_layer(&mut rng, 3, cin, cout, 1, true));
            cin = cout;
        }
        layers.push(init_layer(&mut rng, 1, cin, num_classes, 0, false));
        SegModel {
            layers,
            num_classes,
            in_channels,
            weight_seed,
            train_config: None,
        }
    }

    #[cfg(test)]
    pub(crate) fn from_layers(
        layers: Vec<ConvLayer>,
        num_classes: usize,
        in_channels: usize,
    ) -> SegModel {
        SegModel {
            layers,
            num_classes,
            in_channels,
            weight_seed: 0,
            train_config: None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    /// Mutable layer access for gradient checks and custom initialization.
    pub fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }

    pub fn weight_seed(&self) -> u64 {
        self.weight_seed
    }

    pub fn arch_string(&self) -> String {
        self.layers
            .iter()
            .map(|l| {
                let mut s = format!("conv{k}x{k}x{co}", k = l.kernel_size(), co = l.out_channels());
                if l.relu {
                    s.push_str("-relu");
                }
                s
            })
            .collect::<Vec<_>>()
            .join("|")
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        if image.rank() != 3 || image.shape()[2] != self.in_channels {
            return Err(CoreError::shape_mismatch(
                "model input",
                image.shape(),
                &[0, 0, self.in_channels],
            ));
        }
        Ok(())
    }

    /// Records the full conv stack on a tape. With `track_weights` the
    /// backward pass also yields per-layer weight gradients.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        image: Var,
        track_weights: bool,
    ) -> Result<TapedForward> {
        self.check_image(tape.value(image))?;
        let mut out = image;
        let mut layer_vars = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let k = tape.input(layer.kernels.clone(), track_weights);
            let b = tape.input(layer.bias.clone(), track_weights);
            out = tape.conv2d(out, k, b, 1, layer.padding)?;
            if layer.relu {
                out = tape.relu(out);
            }
            layer_vars.push((k, b));
        }
        Ok(TapedForward {
            layer_vars,
            logits: out,
        })
    }

    /// Tape-free forward pass to the logits.
    pub fn predict_logits(&self, image: &Tensor) -> Result<Tensor> {
        self.check_image(image)?;
        let mut out = None;
        for layer in &self.layers {
            let input = out.as_ref().unwrap_or(image);
            let mut next = kernels::conv2d_forward(input, &layer.kernels, &layer.bias, 1, layer.padding)?;
            if layer.relu {
                next = kernels::relu_forward(&next);
            }
            out = Some(next);
        }
        Ok(out.expect("model has layers"))
    }

    /// Per-pixel class distribution for one image.
    pub fn predict_probs(&self, image: &Tensor) -> Result<SoftmaxField> {
        let logits = self.predict_logits(image)?;
        let probs = kernels::pixel_softmax_forward(&logits)?;
        Ok(SoftmaxField::from_tensor_unchecked(probs))
    }

    /// Mean pixel loss and per-layer weight gradients for one image.
    fn loss_and_weight_grads(&self, item: &LabeledImage) -> Result<(f64, Vec<(Tensor, Tensor)>)> {
        let mut tape = Tape::new();
        let image = tape.input(item.image.clone(), false);
        let fwd = self.forward_on_tape(&mut tape, image, true)?;
        let probs = tape.pixel_softmax(fwd.logits)?;
        let loss = tape.cross_entropy(probs, &item.labels)?;
        let loss_value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let layer_grads = fwd
            .layer_vars
            .iter()
            .map(|&(k, b)| (grads.wrt(k).clone(), grads.wrt(b).clone()))
            .collect();
        Ok((loss_value, layer_grads))
    }
}

fn init_layer(
    rng: &mut ChaCha8Rng,
    kernel: usize,
    cin: usize,
    cout: usize,
    padding: usize,
    relu: bool,
) -> ConvLayer {
    let fan_in = (kernel * kernel * cin) as f64;
    let std = if relu {
        (2.0 / fan_in).sqrt()
    } else {
        (1.0 / fan_in).sqrt()
    };
    let normal = Normal::new(0.0, std).expect("positive std");
    let data: Vec<f64> = (0..kernel * kernel * cin * cout)
        .map(|_| normal.sample(rng))
        .collect();
    ConvLayer {
        kernels: Tensor::from_vec(&[kernel, kernel, cin, cout], data).expect("finite init"),
        bias: Tensor::zeros(&[cout]),
        padding,
        relu,
    }
}

/// Per-pixel argmax; ties broken toward the lowest class index.
pub fn predict_labels(probs: &SoftmaxField) -> LabelMap {
    let mut labels = LabelMap::filled(probs.height(), probs.width(), 0);
    for row in 0..probs.height() {
        for col in 0..probs.width() {
            let pixel = probs.pixel(row, col);
            let mut best = 0usize;
            for (idx, &p) in pixel.iter().enumerate() {
                if p > pixel[best] {
                    best = idx;
                }
            }
            labels.set(row, col, best as u8);
        }
    }
    labels
}

/// Mean intersection-over-union, aggregated over the whole list. Classes
/// absent from both predictions and ground truth are excluded.
pub fn miou(predictions: &[LabelMap], labels: &[LabelMap]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(CoreError::InvalidArgument(format!(
            "miou needs equal-length non-empty lists, got {} vs {}",
            predictions.len(),
            labels.len()
        )));
    }
    let mut intersection = vec![0u64; 256];
    let mut union = vec![0u64; 256];
    for (pred, truth) in predictions.iter().zip(labels) {
        if pred.height() != truth.height() || pred.width() != truth.width() {
            return Err(CoreError::shape_mismatch(
                "miou prediction vs label",
                &[pred.height(), pred.width()],
                &[truth.height(), truth.width()],
            ));
        }
        for (&p, &t) in pred.ids().iter().zip(truth.ids()) {
            if p == t {
                intersection[p as usize] += 1;
                union[p as usize] += 1;
            } else {
                union[p as usize] += 1;
                union[t as usize] += 1;
            }
        }
    }
    let mut total = 0.0;
    let mut classes = 0usize;
    for c in 0..256 {
        if union[c] > 0 {
            total += intersection[c] as f64 / union[c] as f64;
            classes += 1;
        }
    }
    Ok(total / classes as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_miou: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
    pub best_val_miou: Option<f64>,
}

/// Validation mIoU of a model over a split.
pub fn evaluate_miou(model: &SegModel, split: &[LabeledImage]) -> Result<f64> {
    let predictions: Vec<LabelMap> = split
        .par_iter()
        .map(|item| model.predict_probs(&item.image).map(|p| predict_labels(&p)))
        .collect::<Result<_>>()?;
    let truths: Vec<LabelMap> = split.iter().map(|item| item.labels.clone()).collect();
    miou(&predictions, &truths)
}

/// Trains by mini-batch SGD with momentum, returning the weights of the
/// epoch with the best validation mIoU (final weights when `val` is empty).
pub fn train(
    train_split: &[LabeledImage],
    val_split: &[LabeledImage],
    num_classes: usize,
    config: &TrainConfig,
) -> Result<(SegModel, TrainReport)> {
    config.validate()?;
    if train_split.is_empty() {
        return Err(CoreError::InvalidArgument("empty training split".into()));
    }
    let mut model = SegModel::new_toy(num_classes, config.weight_seed);
    model.train_config = Some(config.clone());
    train_existing(&mut model, train_split, val_split, config).map(|report| (model, report))
}

/// Same training loop against a caller-provided model (used for small test
/// architectures).
pub fn train_existing(
    model: &mut SegModel,
    train_split: &[LabeledImage],
    val_split: &[LabeledImage],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if train_split.is_empty() {
        return Err(CoreError::InvalidArgument("empty training split".into()));
    }
    let mut report = TrainReport::default();
    if config.epochs == 0 {
        return Ok(report);
    }

    let mut velocity: Vec<(Tensor, Tensor)> = model
        .layers
        .iter()
        .map(|l| (Tensor::zeros(l.kernels.shape()), Tensor::zeros(l.bias.shape())))
        .collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.weight_seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut best: Option<(f64, Vec<ConvLayer>, usize)> = None;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_split.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.gen_range(0..=i));
        }

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let results: Vec<(f64, Vec<(Tensor, Tensor)>)> = chunk
                .par_iter()
                .map(|&idx| model.loss_and_weight_grads(&train_split[idx]))
                .collect::<Result<_>>()?;
            let batch_loss: f64 =
                results.iter().map(|(l, _)| *l).sum::<f64>() / results.len() as f64;
            if !batch_loss.is_finite() {
                return Err(CoreError::Numeric(format!(
                    "training diverged at epoch {epoch}: batch loss {batch_loss}"
                )));
            }
            epoch_loss += batch_loss;
            batches += 1;

            let scale = 1.0 / results.len() as f64;
            for (layer_idx, layer) in model.layers.iter_mut().enumerate() {
                let (vk, vb) = &mut velocity[layer_idx];
                for (slot, v) in vk.data_mut().iter_mut().enumerate() {
                    let mut g = 0.0;
                    for (_, grads) in &results {
                        g += grads[layer_idx].0.data()[slot];
                    }
                    *v = config.momentum * *v + g * scale;
                }
                for (slot, v) in vb.data_mut().iter_mut().enumerate() {
                    let mut g = 0.0;
                    for (_, grads) in &results {
                        g += grads[layer_idx].1.data()[slot];
                    }
                    *v = config.momentum * *v + g * scale;
                }
                for (w, v) in layer.kernels.data_mut().iter_mut().zip(vk.data()) {
                    *w -= config.learning_rate * v;
                }
                for (w, v) in layer.bias.data_mut().iter_mut().zip(vb.data()) {
                    *w -= config.learning_rate * v;
                }
            }
        }

        let val_miou = if val_split.is_empty() {
            None
        } else {
            let m = evaluate_miou(model, val_split)?;
            if best.as_ref().map_or(true, |(b, _, _)| m > *b) {
                best = Some((m, model.layers.clone(), epoch));
            }
            Some(m)
        };
        report.epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss / batches as f64,
            val_miou,
        });
    }

    if let Some((best_miou, layers, epoch)) = best {
        model.layers = layers;
        report.best_epoch = Some(epoch);
        report.best_val_miou = Some(best_miou);
    }
    Ok(report)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMetadata {
    schema: String,
    arch: String,
    num_classes: usize,
    in_channels: usize,
    weight_seed: u64,
    layers: Vec<LayerMetadata>,
    train_config: Option<TrainConfig>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerMetadata {
    kernel: usize,
    in_channels: usize,
    out_channels: usize,
    padding: usize,
    relu: bool,
}

const CHECKPOINT_SCHEMA: &str = "segdetect-checkpoint-v1";

pub fn save_checkpoint(dir: impl AsRef<Path>, model: &SegModel) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (i, layer) in model.layers.iter().enumerate() {
        save_tensor(dir.join(format!("layer_{i}_kernels.sstn")), &layer.kernels)?;
        save_tensor(dir.join(format!("layer_{i}_bias.sstn")), &layer.bias)?;
    }
    let metadata = CheckpointMetadata {
        schema: CHECKPOINT_SCHEMA.into(),
        arch: model.arch_string(),
        num_classes: model.num_classes,
        in_channels: model.in_channels,
        weight_seed: model.weight_seed,
        layers: model
            .layers
            .iter()
            .map(|l| LayerMetadata {
                kernel: l.kernel_size(),
                in_channels: l.in_channels(),
                out_channels: l.out_channels(),
                padding: l.padding,
                relu: l.relu,
            })
            .collect(),
        train_config: model.train_config.clone(),
    };
    let json = serde_json::to_string_pretty(&metadata)
        .map_err(|e| CoreError::Format(format!("metadata serialization: {e}")))?;
    fs::write(dir.join("metadata.json"), json)?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<SegModel> {
    let dir = dir.as_ref();
    let raw = fs::read_to_string(dir.join("metadata.json"))?;
    let metadata: CheckpointMetadata =
        serde_json::from_str(&raw).map_err(|e| CoreError::Format(format!("metadata parse: {e}")))?;
    if metadata.schema != CHECKPOINT_SCHEMA {
        return Err(CoreError::Format(format!(
            "unknown checkpoint schema {:?}",
            metadata.schema
        )));
    }
    let mut layers = Vec::with_capacity(metadata.layers.len());
    for (i, spec) in metadata.layers.iter().enumerate() {
        let kernels = load_tensor(dir.join(format!("layer_{i}_kernels.sstn")))?;
        let bias = load_tensor(dir.join(format!("layer_{i}_bias.sstn")))?;
        let expected = [spec.kernel, spec.kernel, spec.in_channels, spec.out_channels];
        if kernels.shape() != expected {
            return Err(CoreError::Format(format!(
                "layer {i} kernels shape {:?} does not match metadata {:?}",
                kernels.shape(),
                expected
            )));
        }
        if bias.shape() != [spec.out_channels] {
            return Err(CoreError::Format(format!(
                "layer {i} bias shape {:?} does not match metadata",
                bias.shape()
            )));
        }
        layers.push(ConvLayer {
            kernels,
            bias,
            padding: spec.padding,
            relu: spec.relu,
        });
    }
    let model = SegModel {
        layers,
        num_classes: metadata.num_classes,
        in_channels: metadata.in_channels,
        weight_seed: metadata.weight_seed,
        train_config: metadata.train_config,
    };
    if model.arch_string() != metadata.arch {
        return Err(CoreError::Format(format!(
            "architecture string {:?} does not match layers {:?}",
            metadata.arch,
            model.arch_string()
        )));
    }
    Ok(model)
}
