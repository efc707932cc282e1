//! Deterministic generator of synthetic multi-class scenes.
//!
//! Each image is a stack of randomly placed geometric shapes (rectangles,
//! circles, triangles) over a dark background. Every shape class has a
//! distinct base color, later shapes occlude earlier ones, and Gaussian
//! pixel noise is added last. The label map is the exact rasterization of
//! the shape stack, so re-rasterizing a stored scene reproduces it bit for
//! bit.

use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::labelmap::LabelMap;
use crate::tensor::{load_tensor, save_tensor, Tensor};

pub const IMAGE_CHANNELS: usize = 3;

// Class colors sit deliberately close together (single-channel gaps of
// 0.12 around mid-gray): wide-gap palettes make the pixel classifier so
// robust that budget-bounded attacks cannot cross any decision boundary.
const SHAPE_PALETTE: [[f64; 3]; 8] = [
    [0.58, 0.46, 0.46],
    [0.46, 0.58, 0.46],
    [0.46, 0.46, 0.58],
    [0.58, 0.58, 0.46],
    [0.46, 0.58, 0.58],
    [0.58, 0.46, 0.58],
    [0.58, 0.52, 0.46],
    [0.46, 0.52, 0.58],
];

const BACKGROUND_COLOR: [f64; 3] = [0.46, 0.46, 0.46];

/// Base color of a class; class 0 is the background.
pub fn class_color(class_id: u8) -> [f64; 3] {
    if class_id == 0 {
        BACKGROUND_COLOR
    } else {
        SHAPE_PALETTE[(class_id as usize - 1) % SHAPE_PALETTE.len()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Total class count including background; must be at least 3.
    pub num_classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl SceneConfig {
    /// The default desk-scale configuration.
    pub fn default_desk() -> SceneConfig {
        SceneConfig {
            height: 64,
            width: 64,
            num_classes: 5,
            shapes_min: 3,
            shapes_max: 6,
            noise_std: 0.05,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(CoreError::InvalidArgument("zero-area image".into()));
        }
        if self.num_classes < 3 {
            return Err(CoreError::InvalidArgument(format!(
                "need at least 3 classes (background + 2 shapes), got {}",
                self.num_classes
            )));
        }
        if self.num_classes > 256 {
            return Err(CoreError::InvalidArgument("class ids must fit in u8".into()));
        }
        if self.shapes_min == 0 || self.shapes_max < self.shapes_min {
            return Err(CoreError::InvalidArgument(format!(
                "bad shape count range {}..={}",
                self.shapes_min, self.shapes_max
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "noise_std must be a non-negative real, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ShapeKind {
    Rectangle {
        row0: usize,
        col0: usize,
        height: usize,
        width: usize,
    },
    Circle {
        center_row: f64,
        center_col: f64,
        radius: f64,
    },
    Triangle {
        /// (row, col) coordinates of the three vertices.
        vertices: [[f64; 2]; 3],
    },
}

impl ShapeKind {
    fn contains(&self, row: usize, col: usize) -> bool {
        let pr = row as f64 + 0.5;
        let pc = col as f64 + 0.5;
        match self {
            ShapeKind::Rectangle {
                row0,
                col0,
                height,
                width,
            } => row >= *row0 && row < row0 + height && col >= *col0 && col < col0 + width,
            ShapeKind::Circle {
                center_row,
                center_col,
                radius,
            } => {
                let dr = pr - center_row;
                let dc = pc - center_col;
                dr * dr + dc * dc <= radius * radius
            }
            ShapeKind::Triangle { vertices } => {
                let edge = |a: &[f64; 2], b: &[f64; 2]| -> f64 {
                    (b[0] - a[0]) * (pc - a[1]) - (b[1] - a[1]) * (pr - a[0])
                };
                let e0 = edge(&vertices[0], &vertices[1]);
                let e1 = edge(&vertices[1], &vertices[2]);
                let e2 = edge(&vertices[2], &vertices[0]);
                (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
            }
        }
    }
}

/// One placed shape: its class, geometry, and a per-instance brightness
/// factor applied to the class base color.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSpec {
    pub class_id: u8,
    pub kind: ShapeKind,
    pub shade: f64,
}

/// A fully specified scene; rasterization is a pure function of this.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub shapes: Vec<ShapeSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// H x W x 3 pixel intensities in [0, 1].
    pub image: Tensor,
    pub labels: LabelMap,
}

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn triangle_area(v: &[[f64; 2]; 3]) -> f64 {
    0.5 * ((v[1][0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[1][1] - v[0][1]) * (v[2][0] - v[0][0]))
        .abs()
}

fn sample_scene(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Scene {
    let (h, w) = (config.height, config.width);
    let min_dim = h.min(w);
    let rect_lo = (min_dim / 5).max(3);
    let rect_hi = (2 * min_dim / 5).max(rect_lo + 1);
    let radius_lo = (min_dim / 9).max(2);
    let radius_hi = (min_dim / 5).max(radius_lo + 1);

    let count = rng.gen_range(config.shapes_min..=config.shapes_max);
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = rng.gen_range(1..config.num_classes) as u8;
        let kind = match rng.gen_range(0..3u8) {
            0 => {
                let sh = rng.gen_range(rect_lo..=rect_hi.min(h.saturating_sub(1)).max(rect_lo));
                let sw = rng.gen_range(rect_lo..=rect_hi.min(w.saturating_sub(1)).max(rect_lo));
                let sh = sh.min(h);
                let sw = sw.min(w);
                let row0 = rng.gen_range(0..=h - sh);
                let col0 = rng.gen_range(0..=w - sw);
                ShapeKind::Rectangle {
                    row0,
                    col0,
                    height: sh,
                    width: sw,
                }
            }
            1 => {
                let radius = rng.gen_range(radius_lo..=radius_hi) as f64;
                let r = radius.ceil() as usize;
                let center_row = rng.gen_range(r..h.saturating_sub(r).max(r + 1)) as f64;
                let center_col = rng.gen_range(r..w.saturating_sub(r).max(r + 1)) as f64;
                ShapeKind::Circle {
                    center_row,
                    center_col,
                    radius,
                }
            }
            _ => {
                let side = rng.gen_range(rect_lo..=rect_hi);
                let sh = side.min(h);
                let sw = side.min(w);
                let row0 = rng.gen_range(0..=h - sh) as f64;
                let col0 = rng.gen_range(0..=w - sw) as f64;
                let span_r = Uniform::new_inclusive(row0, row0 + sh as f64);
                let span_c = Uniform::new_inclusive(col0, col0 + sw as f64);
                let min_area = (sh * sw) as f64 * 0.25;
                let mut vertices = [[0.0; 2]; 3];
                for _try in 0..20 {
                    for v in &mut vertices {
                        v[0] = span_r.sample(rng);
                        v[1] = span_c.sample(rng);
                    }
                    if triangle_area(&vertices) >= min_area {
                        break;
                    }
                }
                if triangle_area(&vertices) < min_area {
                    // Fall back to the right triangle of the sampled box.
                    vertices = [
                        [row0, col0],
                        [row0 + sh as f64, col0],
                        [row0, col0 + sw as f64],
                    ];
                }
                ShapeKind::Triangle { vertices }
            }
        };
        let shade = 1.0 + rng.gen_range(-0.04..=0.04);
        shapes.push(ShapeSpec {
            class_id,
            kind,
            shade,
        });
    }
    Scene { shapes }
}

/// The scene that `generate_image` with the same config and index draws.
pub fn generate_scene(config: &SceneConfig, index: usize) -> Scene {
    let mut rng = image_rng(config.seed, index);
    sample_scene(config, &mut rng)
}

/// Rasterizes only the label map; pure in (config dims, scene).
pub fn rasterize_labels(config: &SceneConfig, scene: &Scene) -> LabelMap {
    let mut labels = LabelMap::filled(config.height, config.width, 0);
    for shape in &scene.shapes {
        for row in 0..config.height {
            for col in 0..config.width {
                if shape.kind.contains(row, col) {
                    labels.set(row, col, shape.class_id);
                }
            }
        }
    }
    labels
}

/// Rasterizes the noiseless image and its label map.
pub fn rasterize(config: &SceneConfig, scene: &Scene) -> (Tensor, LabelMap) {
    let (h, w) = (config.height, config.width);
    let mut pixels = Vec::with_capacity(h * w * IMAGE_CHANNELS);
    for _ in 0..h * w {
        pixels.extend_from_slice(&BACKGROUND_COLOR);
    }
    let mut labels = LabelMap::filled(h, w, 0);
    for shape in &scene.shapes {
        let color = class_color(shape.class_id);
        for row in 0..h {
            for col in 0..w {
                if shape.kind.contains(row, col) {
                    labels.set(row, col, shape.class_id);
                    let off = (row * w + col) * IMAGE_CHANNELS;
                    for ch in 0..IMAGE_CHANNELS {
                        pixels[off + ch] = (color[ch] * shape.shade).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    let image = Tensor::from_vec(&[h, w, IMAGE_CHANNELS], pixels).expect("raster fits shape");
    (image, labels)
}

/// Generates the image at `index`: scene, rasterization, then pixel noise,
/// clamped back into [0, 1].
pub fn generate_image(config: &SceneConfig, index: usize) -> LabeledImage {
    let mut rng = image_rng(config.seed, index);
    let scene = sample_scene(config, &mut rng);
    let (mut image, labels) = rasterize(config, &scene);
    if config.noise_std > 0.0 {
        let noise = Normal::new(0.0, config.noise_std).expect("validated noise_std");
        for v in image.data_mut() {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    LabeledImage { image, labels }
}

/// Generates `count` images. Identical config gives a bit-identical dataset.
pub fn generate_dataset(config: &SceneConfig, count: usize) -> Result<Vec<LabeledImage>> {
    config.validate()?;
    if count < 1 {
        return Err(CoreError::InvalidArgument("count must be >= 1".into()));
    }
    Ok((0..count)
        .into_par_iter()
        .map(|index| generate_image(config, index))
        .collect())
}

/// Contiguous 70/15/15 index split, fixed before any attack generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(count: usize) -> SplitIndices {
    let train_end = count * 70 / 100;
    let val_end = train_end + count * 15 / 100;
    SplitIndices {
        train: (0..train_end).collect(),
        val: (train_end..val_end).collect(),
        test: (val_end..count).collect(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    schema: String,
    count: usize,
    config: SceneConfig,
    entries: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    image: String,
    labels: String,
}

const DATASET_SCHEMA: &str = "segdetect-dataset-v1";

/// Writes one SSTN1 file per image and label map plus a manifest.
pub fn save_dataset(dir: impl AsRef<Path>, dataset: &[LabeledImage], config: &SceneConfig) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(dataset.len());
    for (i, item) in dataset.iter().enumerate() {
        let image_name = format!("img_{i:04}.sstn");
        let label_name = format!("lab_{i:04}.sstn");
        save_tensor(dir.join(&image_name), &item.image)?;
        save_tensor(dir.join(&label_name), &item.labels.to_tensor())?;
        entries.push(ManifestEntry {
            image: image_name,
            labels: label_name,
        });
    }
    let manifest = DatasetManifest {
        schema: DATASET_SCHEMA.into(),
        count: dataset.len(),
        config: config.clone(),
        entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CoreError::Format(format!("manifest serialization: {e}")))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(Vec<LabeledImage>, SceneConfig)> {
    let dir = dir.as_ref();
    let raw = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&raw).map_err(|e| CoreError::Format(format!("manifest parse: {e}")))?;
    if manifest.schema != DATASET_SCHEMA {
        return Err(CoreError::Format(format!(
            "unknown dataset schema {:?}",
            manifest.schema
        )));
    }
    if manifest.entries.len() != manifest.count {
        return Err(CoreError::Format(format!(
            "manifest count {} does not match {} entries",
            manifest.count,
            manifest.entries.len()
        )));
    }
    let mut dataset = Vec::with_capacity(manifest.count);
    for entry in &manifest.entries {
        let image = load_tensor(dir.join(&entry.image))?;
        let labels = LabelMap::from_tensor(&load_tensor(dir.join(&entry.labels))?)?;
        labels.validate_classes(manifest.config.num_classes)?;
        dataset.push(LabeledImage { image, labels });
    }
    Ok((dataset, manifest.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small_config() -> SceneConfig {
        SceneConfig {
            height: 24,
            width: 24,
            num_classes: 4,
            shapes_min: 2,
            shapes_max: 4,
            noise_std: 0.05,
            seed: 11,
        }
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut cfg = small_config();
        cfg.num_classes = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.height = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.noise_std = -0.1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn noiseless_rectangle_is_piecewise_constant() {
        let config = SceneConfig {
            height: 16,
            width: 16,
            num_classes: 3,
            shapes_min: 1,
            shapes_max: 1,
            noise_std: 0.0,
            seed: 0,
        };
        let scene = Scene {
            shapes: vec![ShapeSpec {
                class_id: 1,
                kind: ShapeKind::Rectangle {
                    row0: 4,
                    col0: 5,
                    height: 6,
                    width: 7,
                },
                shade: 1.0,
            }],
        };
        let (image, labels) = rasterize(&config, &scene);
        let classes: BTreeSet<u8> = labels.ids().iter().copied().collect();
        assert_eq!(classes, BTreeSet::from([0u8, 1u8]));
        // Piecewise constant: at most two distinct values per channel, and
        // the two regions are distinguishable in at least one channel.
        let mut channels_with_two = 0;
        for ch in 0..IMAGE_CHANNELS {
            let values: BTreeSet<u64> = image
                .data()
                .iter()
                .skip(ch)
                .step_by(IMAGE_CHANNELS)
                .map(|v| v.to_bits())
                .collect();
            assert!(values.len() <= 2, "channel {ch}");
            if values.len() == 2 {
                channels_with_two += 1;
            }
        }
        assert!(channels_with_two >= 1);
        assert_eq!(labels.class_histogram(3)[1], 42);
    }

    #[test]
    fn same_seed_gives_bit_identical_datasets() {
        let config = small_config();
        let a = generate_dataset(&config, 6).unwrap();
        let b = generate_dataset(&config, 6).unwrap();
        assert_eq!(a, b);
        let mut other = config.clone();
        other.seed = 12;
        let c = generate_dataset(&other, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn relabeling_from_stored_scene_matches() {
        let config = small_config();
        for index in 0..8 {
            let scene = generate_scene(&config, index);
            let expected = generate_image(&config, index).labels;
            assert_eq!(rasterize_labels(&config, &scene), expected, "index {index}");
        }
    }

    #[test]
    fn pixels_stay_in_unit_range_under_heavy_noise() {
        let mut config = small_config();
        config.noise_std = 0.4;
        for item in generate_dataset(&config, 4).unwrap() {
            assert!(item.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn background_fraction_regression_bound() {
        // Frozen regression for the default configuration at count 200:
        // the background fraction must sit in [0.2, 0.9] on at least 95%
        // of images.
        let config = SceneConfig::default_desk();
        let dataset = generate_dataset(&config, 200).unwrap();
        let within = dataset
            .iter()
            .filter(|item| {
                let bg = item.labels.class_histogram(config.num_classes)[0] as f64
                    / item.labels.len() as f64;
                (0.2..=0.9).contains(&bg)
            })
            .count();
        assert!(within >= 190, "only {within}/200 within the bound");
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config();
        let dataset = generate_dataset(&config, 3).unwrap();
        save_dataset(dir.path(), &dataset, &config).unwrap();
        let (back, config_back) = load_dataset(dir.path()).unwrap();
        assert_eq!(dataset, back);
        assert_eq!(config, config_back);
    }

    #[test]
    fn truncated_file_fails_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config();
        let dataset = generate_dataset(&config, 2).unwrap();
        save_dataset(dir.path(), &dataset, &config).unwrap();
        let img = dir.path().join("img_0001.sstn");
        let bytes = fs::read(&img).unwrap();
        fs::write(&img, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, CoreError::Format(_)), "got {err:?}");
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config();
        save_dataset(dir.path(), &[], &config).unwrap();
        let (back, _) = load_dataset(dir.path()).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn split_is_contiguous_70_15_15() {
        let split = split_indices(240);
        assert_eq!(split.train.len(), 168);
        assert_eq!(split.val.len(), 36);
        assert_eq!(split.test.len(), 36);
        assert_eq!(split.train[0], 0);
        assert_eq!(*split.test.last().unwrap(), 239);
        let total: Vec<usize> = split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test)
            .copied()
            .collect();
        assert_eq!(total, (0..240).collect::<Vec<_>>());
    }
}
