//! The five pipeline stages. Every stage reads its inputs from fixed
//! subdirectories of the output root, refuses to clobber non-empty output
//! directories unless forced, and echoes the resolved config into each
//! artifact directory it writes.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use segdetect::attacks::suite::{load_catalog, save_catalog};
use segdetect::attacks::AttackCatalog;
use segdetect::datagen::{self, LabeledImage, SplitIndices};
use segdetect::error::{CoreError, Result};
use segdetect::metrics::{self, AccessPurpose, AccessRecord, DetectorData, GridCell};
use segdetect::segnet::{self, predict_labels, SegModel};
use segdetect::uncertainty::{aggregate_features, entropy_heatmap, write_features_csv};

use crate::config::ExperimentConfig;

pub const DATASET_DIR: &str = "dataset";
pub const MODEL_DIR: &str = "model";
pub const ATTACKS_DIR: &str = "attacks";
pub const DETECT_DIR: &str = "detect";
pub const REPORT_DIR: &str = "report";

fn pct(v: f64) -> String {
    format!("{:.4}", v * 100.0)
}

fn write_echo(dir: &Path, config: &ExperimentConfig) -> Result<()> {
    fs::write(dir.join("config_echo.toml"), config.echo_toml()?)?;
    Ok(())
}

/// Refuses to reuse a non-empty directory unless `force` is set.
fn ensure_stage_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(CoreError::InvalidArgument(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        if non_empty {
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn load_splits(out: &Path) -> Result<SplitIndices> {
    let raw = fs::read_to_string(out.join(DATASET_DIR).join("splits.json"))?;
    serde_json::from_str(&raw).map_err(|e| CoreError::Format(format!("splits parse: {e}")))
}

fn load_dataset_checked(
    out: &Path,
    config: &ExperimentConfig,
) -> Result<(Vec<LabeledImage>, SplitIndices)> {
    let (dataset, stored_config) = datagen::load_dataset(out.join(DATASET_DIR))?;
    if stored_config != config.dataset.scene {
        return Err(CoreError::Format(
            "dataset on disk was generated from a different configuration".into(),
        ));
    }
    if dataset.len() != config.dataset.count {
        return Err(CoreError::Format(format!(
            "dataset on disk holds {} images, config wants {}",
            dataset.len(),
            config.dataset.count
        )));
    }
    let splits = load_splits(out)?;
    Ok((dataset, splits))
}

fn select(dataset: &[LabeledImage], indices: &[usize]) -> Vec<LabeledImage> {
    indices.iter().map(|&i| dataset[i].clone()).collect()
}

pub fn cmd_generate(config: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    let dir = out.join(DATASET_DIR);
    ensure_stage_dir(&dir, force)?;
    let dataset = datagen::generate_dataset(&config.dataset.scene, config.dataset.count)?;
    datagen::save_dataset(&dir, &dataset, &config.dataset.scene)?;
    let splits = datagen::split_indices(config.dataset.count);
    let json = serde_json::to_string_pretty(&splits)
        .map_err(|e| CoreError::Format(format!("splits serialization: {e}")))?;
    fs::write(dir.join("splits.json"), json)?;
    write_echo(&dir, config)?;
    println!(
        "generated {} images ({} train / {} val / {} test) into {}",
        dataset.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        dir.display()
    );
    Ok(())
}

pub fn cmd_train(config: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    let (dataset, splits) = load_dataset_checked(out, config)?;
    let dir = out.join(MODEL_DIR);
    ensure_stage_dir(&dir, force)?;

    let train_split = select(&dataset, &splits.train);
    let val_split = select(&dataset, &splits.val);
    let (model, report) = segnet::train(
        &train_split,
        &val_split,
        config.dataset.scene.num_classes,
        &config.train,
    )?;
    segnet::save_checkpoint(&dir, &model)?;

    let mut curve = String::from("epoch,train_loss,val_miou\n");
    for epoch in &report.epochs {
        curve.push_str(&format!(
            "{},{:.6},{}\n",
            epoch.epoch,
            epoch.train_loss,
            epoch
                .val_miou
                .map(|m| format!("{m:.6}"))
                .unwrap_or_default()
        ));
    }
    fs::write(dir.join("curve.csv"), curve)?;
    let report_json = serde_json::to_string_pretty(&report)
        .map_err(|e| CoreError::Format(format!("train report serialization: {e}")))?;
    fs::write(dir.join("train_report.json"), report_json)?;
    write_echo(&dir, config)?;
    println!(
        "trained {} epochs; best val mIoU {:?} at epoch {:?}; checkpoint in {}",
        report.epochs.len(),
        report.best_val_miou,
        report.best_epoch,
        dir.display()
    );
    Ok(())
}

fn mean_apsr(model: &SegModel, images: &[(usize, &segdetect::tensor::Tensor)], labels: &[LabeledImage]) -> Result<f64> {
    let rates: Vec<f64> = images
        .par_iter()
        .map(|&(idx, image)| {
            let probs = model.predict_probs(image)?;
            metrics::apsr(&predict_labels(&probs), &labels[idx].labels)
        })
        .collect::<Result<_>>()?;
    Ok(rates.iter().sum::<f64>() / rates.len() as f64)
}

pub fn cmd_attack(config: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    let (dataset, splits) = load_dataset_checked(out, config)?;
    let model = segnet::load_checkpoint(out.join(MODEL_DIR))?;
    let dir = out.join(ATTACKS_DIR);
    ensure_stage_dir(&dir, force)?;

    let train_split = select(&dataset, &splits.train);
    let test_split = select(&dataset, &splits.test);
    let suite = config.suite_config()?;
    let catalogs = segdetect::attacks::apply_attack_suite(&model, &test_split, &train_split, &suite)?;

    let mut apsr_csv = String::from("attack,group,apsr_pct\n");
    let clean_refs: Vec<(usize, &segdetect::tensor::Tensor)> = test_split
        .iter()
        .enumerate()
        .map(|(i, item)| (i, &item.image))
        .collect();
    let clean = mean_apsr(&model, &clean_refs, &test_split)?;
    apsr_csv.push_str(&format!("benign,clean,{}\n", pct(clean)));

    for catalog in &catalogs {
        save_catalog(dir.join(&catalog.name), catalog)?;
        let adv_refs: Vec<(usize, &segdetect::tensor::Tensor)> = catalog
            .examples
            .iter()
            .map(|e| (e.source_index, &e.image))
            .collect();
        let rate = mean_apsr(&model, &adv_refs, &test_split)?;
        apsr_csv.push_str(&format!(
            "{},{},{}\n",
            catalog.name,
            catalog.group.name(),
            pct(rate)
        ));
    }
    fs::write(dir.join("apsr.csv"), apsr_csv)?;
    write_echo(&dir, config)?;
    println!(
        "generated {} adversarial catalogs over {} test images into {}",
        catalogs.len(),
        test_split.len(),
        dir.display()
    );
    Ok(())
}

fn detector_data_for(
    model: &SegModel,
    name: &str,
    images: Vec<(usize, segdetect::tensor::Tensor)>,
) -> Result<DetectorData> {
    let mut rows: Vec<(usize, segdetect::uncertainty::UncertaintyFeatures, segdetect::uncertainty::Heatmap)> =
        images
            .par_iter()
            .map(|(idx, image)| {
                let probs = model.predict_probs(image)?;
                Ok((*idx, aggregate_features(&probs), entropy_heatmap(&probs)))
            })
            .collect::<Result<_>>()?;
    rows.sort_by_key(|(idx, _, _)| *idx);
    Ok(DetectorData {
        name: name.to_string(),
        features: rows.iter().map(|(_, f, _)| f.clone()).collect(),
        entropy_maps: rows.into_iter().map(|(_, _, h)| h).collect(),
    })
}

pub fn cmd_detect(config: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    let (dataset, splits) = load_dataset_checked(out, config)?;
    let model = segnet::load_checkpoint(out.join(MODEL_DIR))?;
    let attacks_dir = out.join(ATTACKS_DIR);
    let dir = out.join(DETECT_DIR);
    ensure_stage_dir(&dir, force)?;

    let test_split = select(&dataset, &splits.test);
    let specs = config.detector_specs()?;
    let fit_name = config.fit_attack_name();

    // Catalogs in configured order, then the fitting catalog.
    let mut catalog_names: Vec<String> =
        config.attacks.suite.iter().map(|e| e.name.clone()).collect();
    catalog_names.push(fit_name.clone());
    let mut catalogs: Vec<AttackCatalog> = Vec::with_capacity(catalog_names.len());
    for name in &catalog_names {
        let path = attacks_dir.join(name);
        if !path.exists() {
            if *name == fit_name && specs.iter().any(|s| s.is_supervised()) {
                return Err(CoreError::InvalidArgument(format!(
                    "supervised detectors need the {fit_name} catalog; run the attack stage first"
                )));
            }
            return Err(CoreError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("missing attack catalog {}", path.display()),
            )));
        }
        catalogs.push(load_catalog(path)?);
    }

    // Detector inputs for the benign split and every catalog.
    let benign_images: Vec<(usize, segdetect::tensor::Tensor)> = test_split
        .iter()
        .enumerate()
        .map(|(i, item)| (i, item.image.clone()))
        .collect();
    let benign_data = detector_data_for(&model, "benign", benign_images)?;
    let mut catalog_data: Vec<DetectorData> = Vec::with_capacity(catalogs.len());
    for catalog in &catalogs {
        let images: Vec<(usize, segdetect::tensor::Tensor)> = catalog
            .examples
            .iter()
            .map(|e| (e.source_index, e.image.clone()))
            .collect();
        catalog_data.push(detector_data_for(&model, &catalog.name, images)?);
    }
    let fit_index = catalog_data
        .iter()
        .position(|d| d.name == fit_name)
        .expect("fit catalog loaded above");
    let fit_data = catalog_data[fit_index].clone();
    let eval_data: Vec<&DetectorData> = catalog_data
        .iter()
        .filter(|d| d.name != fit_name)
        .collect();

    // Cross-validated grid, one detector at a time with shared folds.
    let mut access: Vec<AccessRecord> = Vec::new();
    let mut grid: Vec<GridCell> = Vec::new();
    for spec in &specs {
        let cells = metrics::cross_validate_detector(
            spec,
            &benign_data,
            Some(&fit_data),
            &eval_data,
            config.detect.folds,
            config.detect.fold_seed,
            &mut access,
        )?;
        grid.extend(cells);
    }

    // Full fits on the complete test split, persisted for reuse.
    let detectors_dir = dir.join("detectors");
    fs::create_dir_all(&detectors_dir)?;
    let all_indices: Vec<usize> = (0..test_split.len()).collect();
    for spec in &specs {
        let model = metrics::fit_detector_full(spec, &benign_data, Some(&fit_data), &all_indices)?;
        model.save(detectors_dir.join(format!("{}.json", spec.name())))?;
    }

    // Fold-level CSV.
    let mut folds_csv = String::from("attack,detector,fold,ada_star,auroc,tpr5\n");
    for cell in &grid {
        for fold in &cell.summary.folds {
            folds_csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                cell.attack,
                cell.detector,
                fold.fold,
                pct(fold.ada_star),
                pct(fold.auroc),
                pct(fold.tpr5)
            ));
        }
    }
    fs::write(dir.join("report_folds.csv"), folds_csv)?;

    // Summary CSV with the grand-average ADA* over all cells.
    let mut summary_csv = String::from(
        "attack,detector,ada_star_mean,ada_star_std,auroc_mean,auroc_std,tpr5_mean,tpr5_std\n",
    );
    let mut grand = 0.0;
    for cell in &grid {
        let (ada_m, ada_s) = cell.summary.ada_star();
        let (auc_m, auc_s) = cell.summary.auroc();
        let (tpr_m, tpr_s) = cell.summary.tpr5();
        grand += ada_m;
        summary_csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            cell.attack,
            cell.detector,
            pct(ada_m),
            pct(ada_s),
            pct(auc_m),
            pct(auc_s),
            pct(tpr_m),
            pct(tpr_s)
        ));
    }
    grand /= grid.len() as f64;
    summary_csv.push_str(&format!("ALL,ALL,{},,,,,\n", pct(grand)));
    fs::write(dir.join("report_summary.csv"), summary_csv)?;

    // Access audit.
    let mut access_csv = String::from("detector,set_name,purpose\n");
    for record in &access {
        access_csv.push_str(&format!(
            "{},{},{}\n",
            record.detector,
            record.set_name,
            match record.purpose {
                AccessPurpose::Fit => "fit",
                AccessPurpose::Evaluate => "evaluate",
            }
        ));
    }
    fs::write(dir.join("access_log.csv"), access_csv)?;

    // Feature export: benign plus every catalog.
    let mut feature_rows = Vec::new();
    for (i, f) in benign_data.features.iter().enumerate() {
        feature_rows.push((format!("test_{i:04}"), "benign".to_string(), f.clone()));
    }
    for data in &catalog_data {
        for (i, f) in data.features.iter().enumerate() {
            feature_rows.push((format!("test_{i:04}"), data.name.clone(), f.clone()));
        }
    }
    let mut features_csv = Vec::new();
    write_features_csv(
        &mut features_csv,
        config.dataset.scene.num_classes,
        &feature_rows,
    )?;
    fs::write(dir.join("features.csv"), features_csv)?;

    write_echo(&dir, config)?;
    println!(
        "evaluated {} detectors against {} catalogs ({} folds); grand-average ADA* {}%",
        specs.len(),
        eval_data.len(),
        config.detect.folds,
        pct(grand)
    );
    Ok(())
}

fn parse_csv(path: &Path) -> Result<Vec<Vec<String>>> {
    let raw = fs::read_to_string(path)?;
    Ok(raw
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(|s| s.to_string()).collect())
        .collect())
}

pub fn cmd_report(config: &ExperimentConfig, out: &Path, _force: bool) -> Result<()> {
    let apsr_rows = parse_csv(&out.join(ATTACKS_DIR).join("apsr.csv"))?;
    let summary_rows = parse_csv(&out.join(DETECT_DIR).join("report_summary.csv"))?;
    let dir = out.join(REPORT_DIR);
    // The report stage is idempotent: it only merges existing artifacts.
    fs::create_dir_all(&dir)?;

    let detectors = &config.detect.detectors;
    let group_of = |attack: &str| -> Option<String> {
        apsr_rows
            .iter()
            .find(|row| row[0] == attack)
            .map(|row| row[1].clone())
    };
    let apsr_of = |attack: &str| -> Option<String> {
        apsr_rows
            .iter()
            .find(|row| row[0] == attack)
            .map(|row| row[2].clone())
    };
    let summary_of = |attack: &str, detector: &str| -> Option<&Vec<String>> {
        summary_rows
            .iter()
            .find(|row| row[0] == attack && row[1] == detector)
    };

    let evaluated_attacks: Vec<String> = config
        .attacks
        .suite
        .iter()
        .map(|e| e.name.clone())
        .collect();

    let mut text = String::new();
    text.push_str("Attack strength and cross-validated detection performance\n");
    text.push_str("(APSR and mean ADA* / AuROC / TPR5, all in percent)\n");
    text.push_str(&"=".repeat(100));
    text.push('\n');
    for group in ["untargeted", "least_likely", "static_target", "class_deletion"] {
        text.push_str(&format!("\n[{group}]\n"));
        text.push_str(&format!("{:<16}{:>9}", "attack", "apsr"));
        for detector in detectors {
            text.push_str(&format!("  {detector:>20}"));
        }
        text.push('\n');
        for attack in &evaluated_attacks {
            if group_of(attack).as_deref() != Some(group) {
                continue;
            }
            let apsr = apsr_of(attack).unwrap_or_default();
            text.push_str(&format!("{attack:<16}{apsr:>9}"));
            for detector in detectors {
                let cell = summary_of(attack, detector)
                    .map(|row| format!("{}/{}/{}", row[2], row[4], row[6]))
                    .unwrap_or_default();
                text.push_str(&format!("  {cell:>20}"));
            }
            text.push('\n');
        }
    }
    if let Some(grand) = summary_of("ALL", "ALL") {
        text.push_str(&format!("\ngrand-average ADA*: {}%\n", grand[2]));
    }
    if let Some(clean) = apsr_of("benign") {
        text.push_str(&format!("benign APSR (1 - pixel accuracy): {clean}%\n"));
    }
    fs::write(dir.join("report.txt"), &text)?;

    // Combined CSV joining attack strength with detection performance.
    let mut combined =
        String::from("attack,group,apsr,detector,ada_star_mean,ada_star_std,auroc_mean,auroc_std,tpr5_mean,tpr5_std\n");
    for attack in &evaluated_attacks {
        let group = group_of(attack).unwrap_or_default();
        let apsr = apsr_of(attack).unwrap_or_default();
        for detector in detectors {
            if let Some(row) = summary_of(attack, detector) {
                combined.push_str(&format!(
                    "{attack},{group},{apsr},{detector},{},{},{},{},{},{}\n",
                    row[2], row[3], row[4], row[5], row[6], row[7]
                ));
            }
        }
    }
    fs::write(dir.join("combined.csv"), combined)?;
    write_echo(&dir, config)?;
    println!("report written to {}", dir.display());
    Ok(())
}
