//! Leave-one-subject-out runs: per fold, split, train, calibrate, score the
//! held-out specimen and persist every artifact.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, AggregateReport, ErrorCategory, Metric, MetricReport};
use crate::error::{invalid, Error, Result};
use crate::explain::{calibrate, ConformalCalibration};
use crate::hashing::config_hash;
use crate::model::{
    loso_split, sigmoid, train, write_history_csv, Checkpoint, CheckpointMeta, EpochRecord, Fold,
    ModelConfig, TrainConfig, VerifierModel,
};
use crate::phantom::{DatasetManifest, ImagePair, RegistrationSample, SampleRecord};
use crate::pose::RegistrationLabel;
use crate::rng::task_rng;

/// Sample uids of one fold's three splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: Fold,
    pub train_ids: Vec<String>,
    pub calibration_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// Holds out whole projections of the training specimens for calibration;
/// the held-out specimen is the test (and validation) split.
pub fn split_fold(
    manifest: &DatasetManifest,
    fold: &Fold,
    calibration_fraction: f64,
    seed: u64,
) -> Result<FoldSplit> {
    let mut projections: Vec<(String, String)> = manifest
        .samples_of(&fold.train_specimens)
        .map(|s| (s.specimen_id.clone(), s.projection_id.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if projections.is_empty() {
        return Err(invalid(format!(
            "fold {} has no training projections",
            fold.index
        )));
    }
    projections.shuffle(&mut task_rng(seed, &[20, fold.index as u64]));
    let mut n_cal = (calibration_fraction * projections.len() as f64).round() as usize;
    if calibration_fraction > 0.0 {
        n_cal = n_cal.max(1);
    }
    if n_cal >= projections.len() {
        return Err(invalid(
            "calibration fraction leaves no training projections",
        ));
    }
    let cal: HashSet<&(String, String)> = projections[..n_cal].iter().collect();
    let mut split = FoldSplit {
        fold: fold.clone(),
        train_ids: Vec::new(),
        calibration_ids: Vec::new(),
        test_ids: Vec::new(),
    };
    for s in &manifest.samples {
        if s.specimen_id == fold.held_out_specimen {
            split.test_ids.push(s.uid());
        } else if fold.train_specimens.contains(&s.specimen_id) {
            if cal.contains(&(s.specimen_id.clone(), s.projection_id.clone())) {
                split.calibration_ids.push(s.uid());
            } else {
                split.train_ids.push(s.uid());
            }
        }
    }
    if split.test_ids.is_empty() {
        return Err(invalid(format!(
            "held-out specimen {} has no samples",
            fold.held_out_specimen
        )));
    }
    Ok(split)
}

fn specimen_of(uid: &str) -> &str {
    uid.split('/').next().unwrap_or(uid)
}

/// Fails with the offending ids if the held-out specimen reaches the
/// training or calibration split, or if any two splits share a sample.
pub fn check_leakage(split: &FoldSplit) -> Result<()> {
    let held = &split.fold.held_out_specimen;
    let mut offending: Vec<String> = split
        .train_ids
        .iter()
        .chain(&split.calibration_ids)
        .filter(|id| specimen_of(id) == held)
        .cloned()
        .collect();
    let train: HashSet<&String> = split.train_ids.iter().collect();
    let cal: HashSet<&String> = split.calibration_ids.iter().collect();
    offending.extend(
        split
            .calibration_ids
            .iter()
            .filter(|id| train.contains(id))
            .cloned(),
    );
    offending.extend(
        split
            .test_ids
            .iter()
            .filter(|id| train.contains(id) || cal.contains(id))
            .cloned(),
    );
    if offending.is_empty() {
        Ok(())
    } else {
        offending.sort();
        offending.dedup();
        Err(Error::DataLeakage(offending))
    }
}

fn records<'a>(manifest: &'a DatasetManifest, ids: &[String]) -> Vec<&'a SampleRecord> {
    let wanted: HashSet<&String> = ids.iter().collect();
    manifest
        .samples
        .iter()
        .filter(|s| wanted.contains(&s.uid()))
        .collect()
}

/// Model output on one case, joined with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasePrediction {
    pub uid: String,
    pub label: RegistrationLabel,
    pub p_accept: f64,
    pub predicted: RegistrationLabel,
    pub category: ErrorCategory,
    pub prediction_set: Vec<RegistrationLabel>,
    pub set_fallback: bool,
}

pub fn predict_cases(
    model: &VerifierModel,
    calibration: &ConformalCalibration,
    samples: &[RegistrationSample],
) -> Result<Vec<CasePrediction>> {
    let pairs: Vec<&ImagePair> = samples.iter().map(|s| &s.pair).collect();
    let logits = model.predict_logits(&pairs, 32)?;
    samples
        .iter()
        .zip(logits)
        .map(|(s, z)| {
            let p = sigmoid(z);
            let predicted = RegistrationLabel::from_accept(p >= 0.5);
            let set = calibration.predict([p, 1.0 - p])?;
            Ok(CasePrediction {
                uid: s.uid(),
                label: s.label,
                p_accept: p,
                predicted,
                category: ErrorCategory::of(predicted, s.label),
                prediction_set: set.labels,
                set_fallback: set.fallback,
            })
        })
        .collect()
}

pub fn write_predictions_csv(path: &Path, preds: &[CasePrediction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "uid",
        "label",
        "p_accept",
        "predicted",
        "category",
        "prediction_set",
        "set_fallback",
    ])?;
    for p in preds {
        let set: Vec<&str> = p.prediction_set.iter().map(|l| l.as_str()).collect();
        w.write_record([
            p.uid.as_str(),
            p.label.as_str(),
            &p.p_accept.to_string(),
            p.predicted.as_str(),
            p.category.as_str(),
            &set.join("|"),
            &p.set_fallback.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub held_out_specimen: String,
    pub train_specimens: Vec<String>,
    pub n_train: usize,
    pub n_calibration: usize,
    pub n_test: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_acc: f64,
    pub metrics: MetricReport,
    pub alpha: f64,
    pub threshold: f64,
    /// Fraction of test cases whose true label is in the prediction set.
    pub coverage: f64,
    pub singleton_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    pub aggregate: AggregateReport,
    pub dataset_config_hash: String,
    pub model_config_hash: String,
    pub train_config_hash: String,
}

/// Everything one trained fold produced.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub split: FoldSplit,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub calibration: ConformalCalibration,
    pub predictions: Vec<CasePrediction>,
    pub report: FoldReport,
}

/// Trains, calibrates and scores a single fold.
pub fn run_fold(
    root: &Path,
    manifest: &DatasetManifest,
    fold: &Fold,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    alpha: f64,
) -> Result<FoldOutcome> {
    let split = split_fold(
        manifest,
        fold,
        train_cfg.calibration_fraction,
        train_cfg.seed,
    )?;
    check_leakage(&split)?;
    log::info!(
        "fold {}: held out {}, {} train / {} calibration / {} test",
        fold.index,
        fold.held_out_specimen,
        split.train_ids.len(),
        split.calibration_ids.len(),
        split.test_ids.len()
    );
    let train_samples = manifest.load_samples(root, records(manifest, &split.train_ids))?;
    let test_samples = manifest.load_samples(root, records(manifest, &split.test_ids))?;
    let outcome = train(train_samples, &test_samples, model_cfg, train_cfg)?;
    let cal_samples = manifest.load_samples(root, records(manifest, &split.calibration_ids))?;
    let train_set: HashSet<String> = split.train_ids.iter().cloned().collect();
    let calibration = calibrate(&outcome.model, &cal_samples, &train_set, alpha)?;
    let predictions = predict_cases(&outcome.model, &calibration, &test_samples)?;
    let probs: Vec<f64> = predictions.iter().map(|p| p.p_accept).collect();
    let truth: Vec<RegistrationLabel> = predictions.iter().map(|p| p.label).collect();
    let metrics = compute_metrics(&probs, &truth)?;
    let n = predictions.len() as f64;
    let coverage = predictions
        .iter()
        .filter(|p| p.prediction_set.contains(&p.label))
        .count() as f64
        / n;
    let singleton_rate = predictions
        .iter()
        .filter(|p| p.prediction_set.len() == 1 && !p.set_fallback)
        .count() as f64
        / n;
    let best_val_acc = outcome
        .history
        .iter()
        .find(|h| h.epoch == outcome.best_epoch)
        .map_or(0.0, |h| h.val_acc);
    let report = FoldReport {
        fold: fold.index,
        held_out_specimen: fold.held_out_specimen.clone(),
        train_specimens: fold.train_specimens.clone(),
        n_train: split.train_ids.len(),
        n_calibration: split.calibration_ids.len(),
        n_test: split.test_ids.len(),
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.len(),
        best_val_acc,
        metrics,
        alpha,
        threshold: calibration.threshold,
        coverage,
        singleton_rate,
    };
    let checkpoint = Checkpoint {
        model: outcome.model,
        meta: CheckpointMeta {
            fold: Some(fold.index),
            held_out_specimen: Some(fold.held_out_specimen.clone()),
            train_specimens: fold.train_specimens.clone(),
            train_sample_ids: split.train_ids.clone(),
            calibration_sample_ids: split.calibration_ids.clone(),
            dataset_config_hash: Some(manifest.config_hash.clone()),
            train_config_hash: Some(config_hash(train_cfg)),
            seed: train_cfg.seed,
            best_epoch: outcome.best_epoch,
            epochs_run: outcome.history.len(),
        },
    };
    Ok(FoldOutcome {
        split,
        checkpoint,
        history: outcome.history,
        calibration,
        predictions,
        report,
    })
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const FOLD_REPORT_FILE: &str = "report.json";
pub const SPLIT_FILE: &str = "split.json";
pub const CV_REPORT_FILE: &str = "cv_report.json";
pub const AGGREGATE_FILE: &str = "aggregate.csv";

pub fn fold_dir(out: &Path, fold: usize) -> std::path::PathBuf {
    out.join(format!("fold-{fold}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

pub fn save_fold(out: &Path, outcome: &FoldOutcome) -> Result<()> {
    let dir = fold_dir(out, outcome.report.fold);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    outcome.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    outcome.calibration.save(&dir.join(CALIBRATION_FILE))?;
    write_history_csv(&dir.join(HISTORY_FILE), &outcome.history)?;
    write_predictions_csv(&dir.join(PREDICTIONS_FILE), &outcome.predictions)?;
    write_json(&dir.join(SPLIT_FILE), &outcome.split)?;
    write_json(&dir.join(FOLD_REPORT_FILE), &outcome.report)
}

/// One row per fold, then `mean` and `std` rows; undefined cells are empty.
pub fn write_aggregate_csv(path: &Path, report: &CvReport) -> Result<()> {
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["fold".to_string()];
    header.extend(Metric::ALL.iter().map(|m| m.as_str().to_string()));
    w.write_record(&header)?;
    for f in &report.folds {
        let mut row = vec![f.fold.to_string()];
        row.extend(Metric::ALL.iter().map(|&m| cell(f.metrics.get(m))));
        w.write_record(&row)?;
    }
    for (name, pick) in [("mean", 0), ("std", 1)] {
        let mut row = vec![name.to_string()];
        row.extend(Metric::ALL.iter().map(|&m| {
            let s = report.aggregate.get(m);
            cell(if pick == 0 { s.mean } else { s.std })
        }));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs the selected folds (all when `only` is `None`) and writes artifacts
/// under `out`.
pub fn run_cv(
    root: &Path,
    manifest: &DatasetManifest,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    alpha: f64,
    out: &Path,
    only: Option<&[usize]>,
) -> Result<CvReport> {
    let folds = loso_split(&manifest.specimen_ids())?;
    if let Some(sel) = only {
        if let Some(bad) = sel.iter().find(|&&k| k >= folds.len()) {
            return Err(invalid(format!(
                "fold {bad} out of range (0..{})",
                folds.len()
            )));
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut reports = Vec::new();
    for fold in &folds {
        if only.is_some_and(|sel| !sel.contains(&fold.index)) {
            continue;
        }
        let outcome = run_fold(root, manifest, fold, model_cfg, train_cfg, alpha)?;
        save_fold(out, &outcome)?;
        log::info!(
            "fold {}: acc {:.3} auc {:?} coverage {:.3}",
            fold.index,
            outcome.report.metrics.accuracy,
            outcome.report.metrics.auc,
            outcome.report.coverage
        );
        reports.push(outcome.report);
    }
    let metrics: Vec<MetricReport> = reports.iter().map(|r| r.metrics.clone()).collect();
    let report = CvReport {
        aggregate: AggregateReport::of(&metrics),
        folds: reports,
        dataset_config_hash: manifest.config_hash.clone(),
        model_config_hash: config_hash(model_cfg),
        train_config_hash: config_hash(train_cfg),
    };
    write_json(&out.join(CV_REPORT_FILE), &report)?;
    write_aggregate_csv(&out.join(AGGREGATE_FILE), &report)?;
    Ok(report)
}
