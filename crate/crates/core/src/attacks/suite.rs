//! The attack suite: one adversarial catalog per (attack, variant, budget)
//! cell, generated against a frozen checkpoint, plus catalog persistence
//! with provenance metadata.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    apply_universal, dag_attack, dnnm_target, fgsm, fgsm_targeted, ifgsm, least_likely_target,
    pgd, static_target, universal_perturbation, AdversarialExample, AttackConfig, UniversalTarget,
};
use crate::datagen::LabeledImage;
use crate::error::{CoreError, Result};
use crate::labelmap::LabelMap;
use crate::segnet::{predict_labels, SegModel};
use crate::tensor::{load_tensor, save_tensor, Tensor};

/// Which of the report's four groupings an attack cell belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackGroup {
    Untargeted,
    LeastLikely,
    StaticTarget,
    ClassDeletion,
}

impl AttackGroup {
    pub fn name(&self) -> &'static str {
        match self {
            AttackGroup::Untargeted => "untargeted",
            AttackGroup::LeastLikely => "least_likely",
            AttackGroup::StaticTarget => "static_target",
            AttackGroup::ClassDeletion => "class_deletion",
        }
    }
}

/// Attack families the suite can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    /// Untargeted single-step sign attack.
    Fgsm,
    /// Targeted single-step sign attack toward the least likely class.
    FgsmLeastLikely,
    /// Untargeted iterative sign attack.
    Ifgsm,
    /// Iterative sign attack toward the least likely class.
    IfgsmLeastLikely,
    /// Untargeted normalized-gradient attack.
    Pgd,
    /// Normalized-gradient attack toward the static target map.
    PgdStatic,
    /// Universal noise fitted toward the static target map.
    Ssmm,
    /// Iterative sign attack toward the class-deletion target.
    Dnnm,
    /// Active-set iterative attack toward the static target map.
    DagStatic,
}

impl AttackKind {
    pub fn group(&self) -> AttackGroup {
        match self {
            AttackKind::Fgsm | AttackKind::Ifgsm | AttackKind::Pgd => AttackGroup::Untargeted,
            AttackKind::FgsmLeastLikely | AttackKind::IfgsmLeastLikely => AttackGroup::LeastLikely,
            AttackKind::PgdStatic | AttackKind::Ssmm | AttackKind::DagStatic => {
                AttackGroup::StaticTarget
            }
            AttackKind::Dnnm => AttackGroup::ClassDeletion,
        }
    }
}

/// One suite cell: a name, the attack family, and its configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteAttackSpec {
    pub name: String,
    pub kind: AttackKind,
    pub config: AttackConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub attacks: Vec<SuiteAttackSpec>,
    /// Train-split index whose label map serves as the shared static target.
    pub static_target_train_index: usize,
    /// Class removed by the class-deletion target.
    pub delete_class: u8,
    /// How many train-split images the universal noise is fitted on.
    pub universal_subset: usize,
    /// Mini-batch size for universal noise fitting.
    pub universal_batch: usize,
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attacks.is_empty() {
            return Err(CoreError::InvalidArgument("empty attack suite".into()));
        }
        let mut names: Vec<&str> = self.attacks.iter().map(|a| a.name.as_str()).collect();
        names.sort();
        names.dedup();
        if names.len() != self.attacks.len() {
            return Err(CoreError::InvalidArgument("duplicate attack cell names".into()));
        }
        for spec in &self.attacks {
            spec.config.validate()?;
        }
        Ok(())
    }
}

/// One adversarial example set with full provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackCatalog {
    pub name: String,
    pub kind: AttackKind,
    pub group: AttackGroup,
    pub config: AttackConfig,
    pub examples: Vec<AdversarialExample>,
}

/// Runs every suite cell against the test split. Attacks on distinct images
/// run concurrently; universal noise fitting is sequential.
pub fn apply_attack_suite(
    model: &SegModel,
    test_split: &[LabeledImage],
    train_split: &[LabeledImage],
    suite: &SuiteConfig,
) -> Result<Vec<AttackCatalog>> {
    suite.validate()?;
    if test_split.is_empty() {
        return Err(CoreError::InvalidArgument("empty test split".into()));
    }
    let static_reference = train_split
        .get(suite.static_target_train_index)
        .ok_or_else(|| {
            CoreError::InvalidArgument(format!(
                "static target index {} outside train split of {}",
                suite.static_target_train_index,
                train_split.len()
            ))
        })?
        .labels
        .clone();

    let mut catalogs = Vec::with_capacity(suite.attacks.len());
    for spec in &suite.attacks {
        let examples = run_cell(model, test_split, train_split, suite, &static_reference, spec)?;
        for (example, item) in examples.iter().zip(test_split) {
            example.check_budget(&item.image, spec.config.epsilon)?;
        }
        catalogs.push(AttackCatalog {
            name: spec.name.clone(),
            kind: spec.kind,
            group: spec.kind.group(),
            config: spec.config.clone(),
            examples,
        });
    }
    Ok(catalogs)
}

fn run_cell(
    model: &SegModel,
    test_split: &[LabeledImage],
    train_split: &[LabeledImage],
    suite: &SuiteConfig,
    static_reference: &LabelMap,
    spec: &SuiteAttackSpec,
) -> Result<Vec<AdversarialExample>> {
    let config = &spec.config;
    let name = spec.name.as_str();
    let per_image = |f: &(dyn Fn(usize, &LabeledImage) -> Result<AdversarialExample> + Sync)| {
        test_split
            .par_iter()
            .enumerate()
            .map(|(i, item)| {
                f(i, item).map(|mut adv| {
                    adv.source_index = i;
                    adv.attack_name = name.to_string();
                    adv
                })
            })
            .collect::<Result<Vec<_>>>()
    };

    match spec.kind {
        AttackKind::Fgsm => per_image(&|_, item| fgsm(model, &item.image, &item.labels, config)),
        AttackKind::Ifgsm => per_image(&|_, item| ifgsm(model, &item.image, &item.labels, config)),
        AttackKind::Pgd => per_image(&|_, item| pgd(model, &item.image, &item.labels, config)),
        AttackKind::FgsmLeastLikely => per_image(&|_, item| {
            let probs = model.predict_probs(&item.image)?;
            let target = least_likely_target(&probs);
            fgsm_targeted(model, &item.image, &target, config)
        }),
        AttackKind::IfgsmLeastLikely => per_image(&|_, item| {
            let probs = model.predict_probs(&item.image)?;
            let target = least_likely_target(&probs);
            ifgsm(model, &item.image, &target, config)
        }),
        AttackKind::PgdStatic => per_image(&|_, item| {
            let target = static_target(
                static_reference,
                item.labels.height(),
                item.labels.width(),
            )?;
            pgd(model, &item.image, &target, config)
        }),
        AttackKind::DagStatic => per_image(&|_, item| {
            let target = static_target(
                static_reference,
                item.labels.height(),
                item.labels.width(),
            )?;
            Ok(dag_attack(model, &item.image, &target, config)?.example)
        }),
        AttackKind::Dnnm => per_image(&|_, item| {
            let probs = model.predict_probs(&item.image)?;
            let prediction = predict_labels(&probs);
            let target = dnnm_target(&prediction, suite.delete_class)?;
            ifgsm(model, &item.image, &target, config)
        }),
        AttackKind::Ssmm => {
            let subset: Vec<Tensor> = train_split
                .iter()
                .take(suite.universal_subset.max(1))
                .map(|item| item.image.clone())
                .collect();
            if subset.is_empty() {
                return Err(CoreError::InvalidArgument(
                    "universal noise needs a non-empty train subset".into(),
                ));
            }
            let noise = universal_perturbation(
                model,
                &subset,
                &UniversalTarget::Shared(static_reference.clone()),
                config,
                suite.universal_batch,
            )?;
            test_split
                .par_iter()
                .enumerate()
                .map(|(i, item)| {
                    apply_universal(&item.image, &noise, i).map(|mut adv| {
                        adv.attack_name = name.to_string();
                        adv
                    })
                })
                .collect()
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CatalogProvenance {
    schema: String,
    attack_name: String,
    kind: AttackKind,
    group: AttackGroup,
    config: AttackConfig,
    source_indices: Vec<usize>,
    linf_distances: Vec<f64>,
    entries: Vec<String>,
}

const CATALOG_SCHEMA: &str = "segdetect-catalog-v1";

/// Persists a catalog: one SSTN1 file per example plus a provenance sidecar.
pub fn save_catalog(dir: impl AsRef<Path>, catalog: &AttackCatalog) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(catalog.examples.len());
    for (i, example) in catalog.examples.iter().enumerate() {
        let file = format!("adv_{i:04}.sstn");
        save_tensor(dir.join(&file), &example.image)?;
        entries.push(file);
    }
    let provenance = CatalogProvenance {
        schema: CATALOG_SCHEMA.into(),
        attack_name: catalog.name.clone(),
        kind: catalog.kind,
        group: catalog.group,
        config: catalog.config.clone(),
        source_indices: catalog.examples.iter().map(|e| e.source_index).collect(),
        linf_distances: catalog.examples.iter().map(|e| e.linf_distance).collect(),
        entries,
    };
    let json = serde_json::to_string_pretty(&provenance)
        .map_err(|e| CoreError::Format(format!("provenance serialization: {e}")))?;
    fs::write(dir.join("provenance.json"), json)?;
    Ok(())
}

pub fn load_catalog(dir: impl AsRef<Path>) -> Result<AttackCatalog> {
    let dir = dir.as_ref();
    let raw = fs::read_to_string(dir.join("provenance.json"))?;
    let provenance: CatalogProvenance = serde_json::from_str(&raw)
        .map_err(|e| CoreError::Format(format!("provenance parse: {e}")))?;
    if provenance.schema != CATALOG_SCHEMA {
        return Err(CoreError::Format(format!(
            "unknown catalog schema {:?}",
            provenance.schema
        )));
    }
    if provenance.entries.len() != provenance.source_indices.len()
        || provenance.entries.len() != provenance.linf_distances.len()
    {
        return Err(CoreError::Format("inconsistent provenance lengths".into()));
    }
    let mut examples = Vec::with_capacity(provenance.entries.len());
    for ((file, &source_index), &linf) in provenance
        .entries
        .iter()
        .zip(&provenance.source_indices)
        .zip(&provenance.linf_distances)
    {
        let image = load_tensor(dir.join(file))?;
        examples.push(AdversarialExample {
            image,
            source_index,
            attack_name: provenance.attack_name.clone(),
            linf_distance: linf,
        });
    }
    Ok(AttackCatalog {
        name: provenance.attack_name,
        kind: provenance.kind,
        group: provenance.group,
        config: provenance.config,
        examples,
    })
}
