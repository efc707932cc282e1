//! Experiment configuration: one TOML file drives every pipeline stage.
//! The resolved config is echoed into each artifact directory, and two runs
//! from the same file produce byte-identical outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use segdetect::attacks::{
    AttackConfig, AttackKind, AttackMode, LabelSource, SuiteAttackSpec, SuiteConfig, TargetSource,
};
use segdetect::datagen::SceneConfig;
use segdetect::detectors::HeatmapTrainConfig;
use segdetect::error::{CoreError, Result};
use segdetect::metrics::DetectorSpec;
use segdetect::segnet::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub train: TrainConfig,
    pub attacks: AttackSection,
    pub detect: DetectSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            output_dir: PathBuf::from("out"),
            dataset: DatasetSection::default(),
            train: TrainConfig::default(),
            attacks: AttackSection::default(),
            detect: DetectSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    #[serde(flatten)]
    pub scene: SceneConfig,
    pub count: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            scene: SceneConfig::default_desk(),
            count: 240,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSection {
    /// Train-split index whose labels serve as the shared static target.
    pub static_target_train_index: usize,
    pub delete_class: u8,
    /// Whether untargeted attacks differentiate against the ground truth or
    /// the model's own prediction.
    pub label_source: LabelSource,
    pub universal_subset: usize,
    pub universal_batch: usize,
    /// Budget of the single-step least-likely catalog used to fit the
    /// supervised detectors.
    pub fit_attack_epsilon: f64,
    pub suite: Vec<SuiteEntry>,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            static_target_train_index: 0,
            delete_class: 1,
            label_source: LabelSource::GroundTruth,
            universal_subset: 64,
            universal_batch: 8,
            fit_attack_epsilon: 2.0,
            suite: default_suite_entries(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub name: String,
    pub kind: AttackKind,
    pub epsilon: f64,
    pub alpha: Option<f64>,
    pub iterations: Option<usize>,
}

fn entry(name: &str, kind: AttackKind, epsilon: f64, alpha: Option<f64>, iterations: Option<usize>) -> SuiteEntry {
    SuiteEntry {
        name: name.into(),
        kind,
        epsilon,
        alpha,
        iterations,
    }
}

fn default_suite_entries() -> Vec<SuiteEntry> {
    vec![
        entry("fgsm_eps4", AttackKind::Fgsm, 4.0, None, Some(1)),
        entry("fgsm_eps8", AttackKind::Fgsm, 8.0, None, Some(1)),
        entry("fgsm_eps16", AttackKind::Fgsm, 16.0, None, Some(1)),
        entry("ifgsm_eps8", AttackKind::Ifgsm, 8.0, None, None),
        entry("ifgsm_ll_eps8", AttackKind::IfgsmLeastLikely, 8.0, None, None),
        entry("pgd_eps8", AttackKind::Pgd, 8.0, Some(2.0), None),
        entry("pgd_tar_eps8", AttackKind::PgdStatic, 8.0, Some(2.0), None),
        entry("ssmm_eps8", AttackKind::Ssmm, 8.0, None, Some(40)),
        entry("dnnm_eps8", AttackKind::Dnnm, 8.0, None, None),
        entry("dag_tar_eps8", AttackKind::DagStatic, 8.0, Some(2.0), None),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectSection {
    pub folds: usize,
    pub fold_seed: u64,
    pub detectors: Vec<String>,
    pub ocsvm_nu: f64,
    pub ocsvm_gamma: Option<f64>,
    pub ellipse_quantile: f64,
    pub crossa_lambda: f64,
    pub heatmap: HeatmapTrainConfig,
}

impl Default for DetectSection {
    fn default() -> Self {
        DetectSection {
            folds: 5,
            fold_seed: 17,
            detectors: vec![
                "entropy".into(),
                "ocsvm".into(),
                "ellipse".into(),
                "crossa".into(),
                "heatmap".into(),
            ],
            ocsvm_nu: 0.1,
            ocsvm_gamma: None,
            ellipse_quantile: 0.975,
            crossa_lambda: 0.01,
            heatmap: HeatmapTrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let raw = std::fs::read_to_string(path.as_ref())?;
        let config: ExperimentConfig =
            toml::from_str(&raw).map_err(|e| CoreError::Format(format!("config parse: {e}")))?;
        if config.schema_version != SCHEMA_VERSION {
            return Err(CoreError::Format(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                config.schema_version
            )));
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.scene.validate()?;
        if self.dataset.count < 10 {
            return Err(CoreError::InvalidArgument(
                "dataset count must be at least 10 for a usable split".into(),
            ));
        }
        self.train.validate()?;
        if self.attacks.fit_attack_epsilon <= 0.0 {
            return Err(CoreError::InvalidArgument(
                "fit_attack_epsilon must be positive".into(),
            ));
        }
        if (self.attacks.delete_class as usize) >= self.dataset.scene.num_classes {
            return Err(CoreError::InvalidArgument(format!(
                "delete_class {} outside the class set",
                self.attacks.delete_class
            )));
        }
        if self.detect.folds < 2 {
            return Err(CoreError::InvalidArgument("need at least 2 folds".into()));
        }
        for name in &self.detect.detectors {
            self.detector_spec(name)?;
        }
        self.suite_config()?.validate()
    }

    /// Derives per-stage seeds from one override value.
    pub fn apply_seed_override(&mut self, seed: u64) {
        self.dataset.scene.seed = seed;
        self.train.weight_seed = seed.wrapping_add(1);
        self.detect.fold_seed = seed.wrapping_add(2);
        self.detect.heatmap.seed = seed.wrapping_add(3);
    }

    /// Name of the catalog that supervised detectors are fitted on.
    pub fn fit_attack_name(&self) -> String {
        let eps = self.attacks.fit_attack_epsilon;
        if eps.fract() == 0.0 {
            format!("fgsm_ll_eps{}", eps as u64)
        } else {
            format!("fgsm_ll_eps{eps}")
        }
    }

    fn attack_spec_for(&self, entry: &SuiteEntry) -> SuiteAttackSpec {
        let (mode, target_source) = match entry.kind {
            AttackKind::Fgsm | AttackKind::Ifgsm | AttackKind::Pgd => {
                (AttackMode::Untargeted, TargetSource::None)
            }
            AttackKind::FgsmLeastLikely | AttackKind::IfgsmLeastLikely => {
                (AttackMode::Targeted, TargetSource::LeastLikely)
            }
            AttackKind::PgdStatic | AttackKind::Ssmm | AttackKind::DagStatic => {
                (AttackMode::Targeted, TargetSource::StaticMask)
            }
            AttackKind::Dnnm => (
                AttackMode::Targeted,
                TargetSource::DeleteClass(self.attacks.delete_class),
            ),
        };
        SuiteAttackSpec {
            name: entry.name.clone(),
            kind: entry.kind,
            config: AttackConfig {
                epsilon: entry.epsilon,
                alpha: entry.alpha.unwrap_or(1.0),
                iterations: entry.iterations,
                mode,
                target_source,
                label_source: self.attacks.label_source,
            },
        }
    }

    /// The full suite: every configured cell plus the detector-fitting
    /// catalog (single-step least-likely attack at the fit budget).
    pub fn suite_config(&self) -> Result<SuiteConfig> {
        let mut attacks: Vec<SuiteAttackSpec> = self
            .attacks
            .suite
            .iter()
            .map(|e| self.attack_spec_for(e))
            .collect();
        let fit_entry = entry(
            &self.fit_attack_name(),
            AttackKind::FgsmLeastLikely,
            self.attacks.fit_attack_epsilon,
            None,
            Some(1),
        );
        attacks.push(self.attack_spec_for(&fit_entry));
        Ok(SuiteConfig {
            attacks,
            static_target_train_index: self.attacks.static_target_train_index,
            delete_class: self.attacks.delete_class,
            universal_subset: self.attacks.universal_subset,
            universal_batch: self.attacks.universal_batch,
        })
    }

    pub fn detector_spec(&self, name: &str) -> Result<DetectorSpec> {
        match name {
            "entropy" => Ok(DetectorSpec::Entropy),
            "ocsvm" => Ok(DetectorSpec::Ocsvm {
                gamma: self.detect.ocsvm_gamma,
                nu: self.detect.ocsvm_nu,
            }),
            "ellipse" => Ok(DetectorSpec::Ellipse {
                quantile: self.detect.ellipse_quantile,
            }),
            "crossa" => Ok(DetectorSpec::CrossA {
                lambda: self.detect.crossa_lambda,
            }),
            "heatmap" => Ok(DetectorSpec::HeatmapCnn {
                train: self.detect.heatmap.clone(),
            }),
            other => Err(CoreError::InvalidArgument(format!(
                "unknown detector {other:?}"
            ))),
        }
    }

    pub fn detector_specs(&self) -> Result<Vec<DetectorSpec>> {
        self.detect
            .detectors
            .iter()
            .map(|name| self.detector_spec(name))
            .collect()
    }

    /// Serialized form written into every artifact directory.
    pub fn echo_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CoreError::Format(format!("config echo: {e}")))
    }
}
