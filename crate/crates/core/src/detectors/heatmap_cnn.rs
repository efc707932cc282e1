//! Shallow conv net reading entire entropy heatmaps: two 3x3 conv+relu
//! layers with 8 channels, global average pooling, and an affine logistic
//! head. Trained with binary cross entropy through the tape engine; benign
//! heatmaps are the positive class.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tape};
use crate::detectors::DetectorModel;
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use crate::uncertainty::Heatmap;

const CHANNELS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for HeatmapTrainConfig {
    fn default() -> Self {
        HeatmapTrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 19,
        }
    }
}

impl HeatmapTrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::InvalidArgument(
                "heatmap training needs positive epochs and batch size".into(),
            ));
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCnnModel {
    pub conv1_kernels: Tensor,
    pub conv1_bias: Tensor,
    pub conv2_kernels: Tensor,
    pub conv2_bias: Tensor,
    pub head_weights: Tensor,
    pub head_bias: Tensor,
    pub height: usize,
    pub width: usize,
}

impl HeatmapCnnModel {
    fn init(height: usize, width: usize, seed: u64) -> HeatmapCnnModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sample = |shape: &[usize], fan_in: usize| -> Tensor {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let len: usize = shape.iter().product();
            let data: Vec<f64> = (0..len).map(|_| normal.sample(&mut rng)).collect();
            Tensor::from_vec(shape, data).expect("finite init")
        };
        HeatmapCnnModel {
            conv1_kernels: sample(&[3, 3, 1, CHANNELS], 9),
            conv1_bias: Tensor::zeros(&[CHANNELS]),
            conv2_kernels: sample(&[3, 3, CHANNELS, CHANNELS], 9 * CHANNELS),
            conv2_bias: Tensor::zeros(&[CHANNELS]),
            head_weights: sample(&[CHANNELS], CHANNELS),
            head_bias: Tensor::zeros(&[1]),
            height,
            width,
        }
    }

    fn check_input(&self, map: &Heatmap) -> Result<Tensor> {
        if map.height() != self.height || map.width() != self.width {
            return Err(CoreError::shape_mismatch(
                "heatmap detector input",
                &[map.height(), map.width()],
                &[self.height, self.width],
            ));
        }
        Tensor::from_vec(&[self.height, self.width, 1], map.values.data().to_vec())
    }

    /// Network output: probability that the heatmap comes from a benign
    /// image.
    pub fn score(&self, map: &Heatmap) -> Result<f64> {
        let input = self.check_input(map)?;
        let h1 = kernels::relu_forward(&kernels::conv2d_forward(
            &input,
            &self.conv1_kernels,
            &self.conv1_bias,
            1,
            1,
        )?);
        let h2 = kernels::relu_forward(&kernels::conv2d_forward(
            &h1,
            &self.conv2_kernels,
            &self.conv2_bias,
            1,
            1,
        )?);
        let pooled = kernels::global_avg_pool_forward(&h2)?;
        let logit = kernels::affine_forward(&pooled, &self.head_weights, &self.head_bias)?;
        Ok(kernels::sigmoid_forward(&Tensor::scalar(logit)).item())
    }

    /// Loss and parameter gradients for one (heatmap, target) pair.
    fn loss_and_grads(&self, input: &Tensor, target: f64) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let x = tape.input(input.clone(), false);
        let k1 = tape.input(self.conv1_kernels.clone(), true);
        let b1 = tape.input(self.conv1_bias.clone(), true);
        let k2 = tape.input(self.conv2_kernels.clone(), true);
        let b2 = tape.input(self.conv2_bias.clone(), true);
        let w = tape.input(self.head_weights.clone(), true);
        let b = tape.input(self.head_bias.clone(), true);

        let c1 = tape.conv2d(x, k1, b1, 1, 1)?;
        let r1 = tape.relu(c1);
        let c2 = tape.conv2d(r1, k2, b2, 1, 1)?;
        let r2 = tape.relu(c2);
        let pooled = tape.global_avg_pool(r2)?;
        let logit = tape.affine(pooled, w, b)?;
        let prob = tape.sigmoid(logit);
        let loss = tape.bce_loss(prob, target)?;
        let loss_value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        Ok((
            loss_value,
            vec![k1, b1, k2, b2, w, b]
                .into_iter()
                .map(|v| grads.wrt(v).clone())
                .collect(),
        ))
    }

    fn params_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.conv1_kernels,
            &mut self.conv1_bias,
            &mut self.conv2_kernels,
            &mut self.conv2_bias,
            &mut self.head_weights,
            &mut self.head_bias,
        ]
    }
}

fn sorted_maps(maps: &[Heatmap]) -> Vec<&Heatmap> {
    let mut sorted: Vec<&Heatmap> = maps.iter().collect();
    sorted.sort_by(|a, b| {
        a.values
            .data()
            .partial_cmp(b.values.data())
            .expect("finite heatmaps")
    });
    sorted
}

/// Trains the heatmap classifier on benign (target 1) versus adversarial
/// (target 0) entropy heatmaps.
pub fn fit_heatmap_cnn(
    benign: &[Heatmap],
    adversarial: &[Heatmap],
    config: &HeatmapTrainConfig,
) -> Result<DetectorModel> {
    config.validate()?;
    if benign.is_empty() || adversarial.is_empty() {
        return Err(CoreError::InvalidArgument(
            "supervised fit needs both benign and adversarial heatmaps".into(),
        ));
    }
    let (h, w) = (benign[0].height(), benign[0].width());
    let mut samples: Vec<(Tensor, f64)> = Vec::with_capacity(benign.len() + adversarial.len());
    for map in sorted_maps(benign) {
        if map.height() != h || map.width() != w {
            return Err(CoreError::shape_mismatch(
                "heatmap fit set",
                &[map.height(), map.width()],
                &[h, w],
            ));
        }
        samples.push((
            Tensor::from_vec(&[h, w, 1], map.values.data().to_vec())?,
            1.0,
        ));
    }
    for map in sorted_maps(adversarial) {
        if map.height() != h || map.width() != w {
            return Err(CoreError::shape_mismatch(
                "heatmap fit set",
                &[map.height(), map.width()],
                &[h, w],
            ));
        }
        samples.push((
            Tensor::from_vec(&[h, w, 1], map.values.data().to_vec())?,
            0.0,
        ));
    }

    let mut model = HeatmapCnnModel::init(h, w, config.seed);
    let mut velocity: Vec<Tensor> = vec![
        Tensor::zeros(model.conv1_kernels.shape()),
        Tensor::zeros(model.conv1_bias.shape()),
        Tensor::zeros(model.conv2_kernels.shape()),
        Tensor::zeros(model.conv2_bias.shape()),
        Tensor::zeros(model.head_weights.shape()),
        Tensor::zeros(model.head_bias.shape()),
    ];
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5851_F42D_4C95_7F2D);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.gen_range(0..=i));
        }
        for chunk in order.chunks(config.batch_size) {
            let results: Vec<(f64, Vec<Tensor>)> = chunk
                .par_iter()
                .map(|&idx| model.loss_and_grads(&samples[idx].0, samples[idx].1))
                .collect::<Result<_>>()?;
            let batch_loss =
                results.iter().map(|(l, _)| *l).sum::<f64>() / results.len() as f64;
            if !batch_loss.is_finite() {
                return Err(CoreError::Numeric(format!(
                    "heatmap training diverged at epoch {epoch}"
                )));
            }
            let scale = 1.0 / results.len() as f64;
            let params = model.params_mut();
            for (slot, (param, vel)) in params.into_iter().zip(&mut velocity).enumerate() {
                for i in 0..param.len() {
                    let mut g = 0.0;
                    for (_, grads) in &results {
                        g += grads[slot].data()[i];
                    }
                    let v = &mut vel.data_mut()[i];
                    *v = config.momentum * *v + g * scale;
                    param.data_mut()[i] -= config.learning_rate * *v;
                }
            }
        }
    }
    Ok(DetectorModel::Heatmap(model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detectors::DetectorInput;
    use crate::metrics::{ada_star, cross_validate, ScoredSample};
    use crate::uncertainty::HeatmapKind;

    fn map(h: usize, w: usize, fill: impl Fn(usize, usize) -> f64) -> Heatmap {
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(fill(r, c).clamp(0.0, 1.0));
            }
        }
        Heatmap {
            kind: HeatmapKind::Entropy,
            values: Tensor::from_vec(&[h, w], data).unwrap(),
        }
    }

    fn quick_config(epochs: usize) -> HeatmapTrainConfig {
        HeatmapTrainConfig {
            epochs,
            batch_size: 8,
            learning_rate: 0.3,
            momentum: 0.9,
            seed: 19,
        }
    }

    #[test]
    fn constant_classes_are_perfectly_separable() {
        let benign: Vec<Heatmap> = (0..12).map(|_| map(8, 8, |_, _| 0.0)).collect();
        let adv: Vec<Heatmap> = (0..12).map(|_| map(8, 8, |_, _| 1.0)).collect();
        let model = fit_heatmap_cnn(&benign, &adv, &quick_config(40)).unwrap();
        let samples: Vec<ScoredSample> = benign
            .iter()
            .map(|m| ScoredSample::benign(model.score(&DetectorInput::Heatmap(m)).unwrap()))
            .chain(
                adv.iter()
                    .map(|m| ScoredSample::perturbed(model.score(&DetectorInput::Heatmap(m)).unwrap())),
            )
            .collect();
        assert_eq!(ada_star(&samples), 1.0);
    }

    #[test]
    fn training_is_deterministic_given_seeds() {
        let benign: Vec<Heatmap> = (0..6)
            .map(|i| map(6, 6, |r, c| ((r * 7 + c * 3 + i) % 10) as f64 / 10.0))
            .collect();
        let adv: Vec<Heatmap> = (0..6)
            .map(|i| map(6, 6, |r, c| ((r * 5 + c * 11 + i) % 10) as f64 / 10.0 * 0.5 + 0.5))
            .collect();
        let a = fit_heatmap_cnn(&benign, &adv, &quick_config(5)).unwrap();
        let b = fit_heatmap_cnn(&benign, &adv, &quick_config(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let benign = vec![map(6, 6, |_, _| 0.2), map(6, 6, |_, _| 0.25)];
        let adv = vec![map(5, 6, |_, _| 0.8)];
        assert!(fit_heatmap_cnn(&benign, &adv, &quick_config(1)).is_err());

        let model = fit_heatmap_cnn(
            &benign,
            &[map(6, 6, |_, _| 0.8)],
            &quick_config(1),
        )
        .unwrap();
        let probe = map(4, 4, |_, _| 0.3);
        assert!(model.score(&DetectorInput::Heatmap(&probe)).is_err());
    }

    #[test]
    fn label_shuffled_training_stays_near_chance() {
        // Null-distribution check: heatmaps carry real structure but the
        // class assignment is random, so cross-validated ADA* must hover
        // near 0.5.
        let n = 150usize;
        let mut state = 31u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 33) as f64 / (1u64 << 31) as f64
        };
        let maps: Vec<Heatmap> = (0..2 * n)
            .map(|_| {
                let base = next() * 0.8;
                let noise: Vec<f64> = (0..36).map(|_| base + next() * 0.2).collect();
                map(6, 6, |r, c| noise[r * 6 + c])
            })
            .collect();
        let (first, second) = maps.split_at(n);
        let first = first.to_vec();
        let second = second.to_vec();

        let summary = cross_validate(n, 5, 7, |fit, eval| {
            let fit_benign: Vec<Heatmap> = fit.iter().map(|&i| first[i].clone()).collect();
            let fit_adv: Vec<Heatmap> = fit.iter().map(|&i| second[i].clone()).collect();
            let model = fit_heatmap_cnn(&fit_benign, &fit_adv, &quick_config(6))?;
            let mut samples = Vec::new();
            for &i in eval {
                samples.push(ScoredSample::benign(
                    model.score(&DetectorInput::Heatmap(&first[i]))?,
                ));
                samples.push(ScoredSample::perturbed(
                    model.score(&DetectorInput::Heatmap(&second[i]))?,
                ));
            }
            Ok(samples)
        })
        .unwrap();
        let (mean_ada, _) = summary.ada_star();
        assert!(
            (0.4..=0.6).contains(&mean_ada),
            "null CV ADA* {mean_ada} outside [0.4, 0.6]"
        );
    }
}
