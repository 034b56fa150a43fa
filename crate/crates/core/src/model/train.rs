//! Mini-batch training with BCE on logits, AdamW and best-validation-loss
//! model selection.

use std::io::Write;
use std::path::Path;

use ndarray::Array1;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, TrainConfig};
use super::network::{bce_with_logits, sigmoid, Mode, VerifierModel};
use super::optim::AdamW;
use crate::error::{invalid, Error, Result};
use crate::phantom::{filter_projections, oversample_accepts, ImagePair, RegistrationSample};
use crate::rng::task_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: VerifierModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Training-set size after filtering and oversampling.
    pub train_size: usize,
}

/// Mean BCE and accuracy (threshold 0.5) of `model` on `samples`.
pub fn evaluate_loss(model: &VerifierModel, samples: &[RegistrationSample]) -> Result<(f64, f64)> {
    let pairs: Vec<&ImagePair> = samples.iter().map(|s| &s.pair).collect();
    let logits = Array1::from(model.predict_logits(&pairs, 32)?);
    let targets: Array1<f64> = samples
        .iter()
        .map(|s| s.label.is_accept() as u8 as f64)
        .collect();
    let (loss, _) = bce_with_logits(&logits, &targets);
    let correct = logits
        .iter()
        .zip(targets.iter())
        .filter(|(&z, &y)| (sigmoid(z) >= 0.5) == (y == 1.0))
        .count();
    Ok((loss, correct as f64 / samples.len().max(1) as f64))
}

/// Trains a fresh model. The training split is projection-filtered and
/// accept-oversampled here; `val` is used as given.
pub fn train(
    train: Vec<RegistrationSample>,
    val: &[RegistrationSample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(invalid("training and validation splits must be non-empty"));
    }
    let filtered = filter_projections(&train, cfg.max_reject_fraction);
    let accepts = filtered.iter().filter(|s| s.label.is_accept()).count();
    if accepts == 0 || accepts == filtered.len() {
        return Err(invalid("training split contains a single class"));
    }
    let mut aug_rng = task_rng(cfg.seed, &[10]);
    let data = oversample_accepts(filtered, &mut aug_rng, cfg.oversample_ratio, &cfg.augment)?;

    let mut model = VerifierModel::new(model_cfg.clone(), cfg.seed)?;
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut dropout_rng = task_rng(cfg.seed, &[12]);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, VerifierModel)> = None;
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut task_rng(cfg.seed, &[11, epoch as u64]));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let pairs: Vec<&ImagePair> = batch.iter().map(|&i| &data[i].pair).collect();
            let targets: Array1<f64> = batch
                .iter()
                .map(|&i| data[i].label.is_accept() as u8 as f64)
                .collect();
            let x = model.batch_input(&pairs)?;
            let (logits, cache) = model.forward_batch(
                &x,
                Mode::Train {
                    rng: &mut dropout_rng,
                },
            )?;
            let (loss, dlogits) = bce_with_logits(&logits, &targets);
            if !loss.is_finite() {
                return Err(Error::TrainingFailure { epoch });
            }
            loss_sum += loss * batch.len() as f64;
            let mut grads = model.zeros_like();
            model.backward(&cache, &dlogits, &mut grads);
            opt.step(&mut model, &grads);
            model.update_running_stats(&cache);
        }
        let train_loss = loss_sum / data.len() as f64;
        if !model.is_finite() {
            return Err(Error::TrainingFailure { epoch });
        }
        let (val_loss, val_acc) = evaluate_loss(&model, val)?;
        if !val_loss.is_finite() {
            return Err(Error::TrainingFailure { epoch });
        }
        log::info!(
            "epoch {epoch}: train_loss {train_loss:.4} val_loss {val_loss:.4} val_acc {val_acc:.3}"
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_acc,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        train_size: data.len(),
    })
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("epoch,train_loss,val_loss,val_acc\n");
    for r in history {
        text.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_loss, r.val_acc
        ));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
