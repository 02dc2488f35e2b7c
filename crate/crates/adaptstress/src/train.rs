//! Supervised training with adversarial domain adaptation and early
//! stopping.
//!
//! One run trains on a fold's training windows, validates on the held-out
//! validation participant after every epoch, and keeps the parameters from
//! the best validation epoch. The stopping rule and bookkeeping live in a
//! driver that is independent of the model, so the control flow can be
//! tested against scripted metric sequences.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_warmup_lr, Adam, Tensor};
use crate::error::Error;
use crate::model::{combined_loss, AdaptStressModel, ModelConfig};
use crate::rng::stream;
use crate::tta::forecast_mse;
use crate::window::WindowedSample;
use crate::Result;

/// Training-loop hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub lr_max: f64,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 350,
            patience: 30,
            lr_max: 5e-4,
            warmup_epochs: 10,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub lr: f64,
}

/// Everything observed during one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRunRecord {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose validation MSE was minimal.
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

/// Early-stopping driver, separated from the model so stopping behavior can
/// be tested with scripted metrics. `step` runs one 1-based epoch and
/// returns (train loss, val MSE, lr); `on_best` fires whenever val MSE
/// strictly improves. Stops after `patience` consecutive epochs without
/// improvement.
pub fn run_epochs(
    total_epochs: usize,
    patience: usize,
    mut step: impl FnMut(usize) -> Result<(f64, f64, f64)>,
    mut on_best: impl FnMut(usize) -> Result<()>,
) -> Result<TrainRunRecord> {
    if total_epochs == 0 || patience == 0 {
        return Err(Error::Config(
            "training needs at least one epoch and nonzero patience".into(),
        ));
    }
    let mut record = TrainRunRecord {
        epochs: Vec::new(),
        best_epoch: 0,
        stop_reason: StopReason::MaxEpochs,
    };
    let mut best_val = f64::INFINITY;
    let mut since_best = 0;
    for epoch in 1..=total_epochs {
        let (train_loss, val_mse, lr) = step(epoch)?;
        if !train_loss.is_finite() || !val_mse.is_finite() {
            return Err(Error::Training(format!(
                "non-finite metrics at epoch {epoch}: train {train_loss}, val {val_mse}"
            )));
        }
        record.epochs.push(EpochRecord { epoch, train_loss, val_mse, lr });
        if val_mse < best_val {
            best_val = val_mse;
            record.best_epoch = epoch;
            since_best = 0;
            on_best(epoch)?;
        } else {
            since_best += 1;
            if since_best == patience {
                record.stop_reason = StopReason::EarlyStop;
                break;
            }
        }
    }
    Ok(record)
}

fn batch_tensors(
    samples: &[&WindowedSample],
    t: usize,
    d: usize,
    w_out: usize,
) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let b = samples.len();
    let mut inputs = Vec::with_capacity(b * t * d);
    let mut targets = Vec::with_capacity(b * w_out);
    let mut labels = Vec::with_capacity(b);
    for s in samples {
        if s.inputs.len() != t * d || s.targets.len() != w_out {
            return Err(Error::Training(format!(
                "sample shape {}x{} does not match model {t}x{d}/{w_out}",
                s.inputs.len(),
                s.targets.len()
            )));
        }
        inputs.extend_from_slice(&s.inputs);
        targets.extend_from_slice(&s.targets);
        labels.push(s.domain_label.ok_or_else(|| {
            Error::Training(format!(
                "training sample from {} lacks a domain label",
                s.participant_id
            ))
        })?);
    }
    Ok((
        Tensor::from_vec(&[b, t, d], inputs),
        Tensor::from_vec(&[b, w_out], targets),
        labels,
    ))
}

/// Trains a fresh model on the fold's windows. Returns the model restored
/// to its best-validation parameters together with the run record.
///
/// Validation MSE uses the forecast only; the domain term never feeds the
/// stopping rule (the held-out participant has no training domain).
pub fn train_phase1(
    fold: usize,
    train: &[WindowedSample],
    val: &[WindowedSample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(AdaptStressModel, TrainRunRecord)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Fold {
            fold,
            message: format!(
                "training needs samples on both sides: train {}, val {}",
                train.len(),
                val.len()
            ),
        });
    }
    let t = model_cfg.w_in;
    let d = model_cfg.d_features;
    let w_out = model_cfg.w_out;
    let model = AdaptStressModel::new(model_cfg.clone(), cfg.seed)?;
    let mut opt = Adam::new();
    let mut best_params: Vec<Vec<f64>> =
        model.params.iter().map(|(_, p)| p.to_vec()).collect();

    let record = run_epochs(
        cfg.epochs,
        cfg.patience,
        |epoch| {
            let lr = cosine_warmup_lr(epoch - 1, cfg.warmup_epochs, cfg.epochs, cfg.lr_max)?;
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut stream(cfg.seed, "train-shuffle", epoch as u64));
            let mut dropout_rng = stream(cfg.seed, "train-dropout", epoch as u64);
            let mut loss_sum = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(cfg.batch_size) {
                let samples: Vec<&WindowedSample> =
                    chunk.iter().map(|&i| &train[i]).collect();
                let (x, targets, labels) = batch_tensors(&samples, t, d, w_out)?;
                let out = model.forward(&x, true, Some(&mut dropout_rng));
                let parts = combined_loss(
                    &out.y_hat,
                    &targets,
                    Some((out.domain_logits.as_ref().expect("domain requested"), &labels)),
                    model_cfg.grl_alpha,
                )?;
                let value = parts.total.value();
                if !value.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss in fold {fold}, epoch {epoch}"
                    )));
                }
                loss_sum += value;
                batches += 1;
                parts.total.backward()?;
                opt.step(&model.params, lr)?;
            }
            let val_mse = forecast_mse(&model, val)?;
            Ok((loss_sum / batches as f64, val_mse, lr))
        },
        |_| {
            best_params = model.params.iter().map(|(_, p)| p.to_vec()).collect();
            Ok(())
        },
    )?;

    for ((_, param), best) in model.params.iter().zip(best_params) {
        param.set_data(best);
    }
    Ok((model, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use rand::Rng;

    #[test]
    fn scripted_flat_validation_stops_at_patience() {
        let vals = |e: usize| if e <= 5 { 1.0 - e as f64 * 0.1 } else { 0.5 };
        let mut best_calls = Vec::new();
        let record = run_epochs(
            350,
            30,
            |e| Ok((0.5, vals(e), 1e-3)),
            |e| {
                best_calls.push(e);
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(record.stop_reason, StopReason::EarlyStop);
        assert_eq!(record.epochs.len(), 35);
        assert_eq!(record.best_epoch, 5);
        assert_eq!(best_calls, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn scripted_always_improving_runs_to_the_end() {
        let record = run_epochs(
            350,
            30,
            |e| Ok((0.5, 1.0 / e as f64, 1e-3)),
            |_| Ok(()),
        )
        .unwrap();
        assert_eq!(record.stop_reason, StopReason::MaxEpochs);
        assert_eq!(record.epochs.len(), 350);
        assert_eq!(record.best_epoch, 350);
    }

    #[test]
    fn best_epoch_is_argmin_of_validation() {
        let vals = [0.9, 0.7, 0.8, 0.3, 0.5, 0.4];
        let record = run_epochs(
            6,
            30,
            |e| Ok((0.0, vals[e - 1], 0.0)),
            |_| Ok(()),
        )
        .unwrap();
        let min = record
            .epochs
            .iter()
            .min_by(|a, b| a.val_mse.partial_cmp(&b.val_mse).unwrap())
            .unwrap();
        assert_eq!(record.best_epoch, min.epoch);
        assert_eq!(record.best_epoch, 4);
    }

    #[test]
    fn equal_value_does_not_reset_patience() {
        let record = run_epochs(
            100,
            3,
            |e| Ok((0.0, if e == 1 { 0.5 } else { 0.5 }, 0.0)),
            |_| Ok(()),
        )
        .unwrap();
        assert_eq!(record.stop_reason, StopReason::EarlyStop);
        assert_eq!(record.epochs.len(), 4);
        assert_eq!(record.best_epoch, 1);
    }

    #[test]
    fn non_finite_metrics_abort() {
        let err = run_epochs(10, 3, |_| Ok((f64::NAN, 0.5, 0.0)), |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Training(_)), "{err}");
    }

    fn toy_windows(
        n: usize,
        t: usize,
        d: usize,
        w_out: usize,
        domains: usize,
        seed: u64,
    ) -> Vec<WindowedSample> {
        let mut rng = stream(seed, "train-test-data", 0);
        (0..n)
            .map(|i| {
                let inputs: Vec<f64> =
                    (0..t * d).map(|_| rng.gen_range(0.0..1.0)).collect();
                // target: smooth deterministic function of the inputs
                let mean = inputs.iter().sum::<f64>() / inputs.len() as f64;
                let targets: Vec<f64> =
                    (0..w_out).map(|k| (mean + 0.05 * k as f64).min(1.0)).collect();
                WindowedSample {
                    inputs,
                    targets,
                    participant_id: format!("P{:02}", i % domains + 1),
                    domain_label: Some(i % domains),
                    anchor_date: NaiveDate::from_ymd_opt(2025, 1, 1).unwrap()
                        + chrono::Days::new(i as u64),
                    anchor_stress: 0.5,
                }
            })
            .collect()
    }

    fn tiny_cfg(domains: usize) -> ModelConfig {
        ModelConfig {
            d_features: 3,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 8,
            w_in: 3,
            w_out: 2,
            n_domains: domains,
            dropout: 0.0,
            grl_alpha: 0.05,
        }
    }

    #[test]
    fn training_is_deterministic() {
        let train = toy_windows(12, 3, 3, 2, 2, 5);
        let val = toy_windows(4, 3, 3, 2, 2, 6);
        let cfg = TrainConfig {
            epochs: 8,
            patience: 8,
            warmup_epochs: 2,
            seed: 3,
            ..TrainConfig::default()
        };
        let (m1, r1) = train_phase1(0, &train, &val, &tiny_cfg(2), &cfg).unwrap();
        let (m2, r2) = train_phase1(0, &train, &val, &tiny_cfg(2), &cfg).unwrap();
        assert_eq!(r1.best_epoch, r2.best_epoch);
        for (a, b) in r1.epochs.iter().zip(&r2.epochs) {
            assert_eq!(a.train_loss, b.train_loss);
            assert_eq!(a.val_mse, b.val_mse);
        }
        for ((_, p1), (_, p2)) in m1.params.iter().zip(m2.params.iter()) {
            assert_eq!(p1.to_vec(), p2.to_vec());
        }
    }

    #[test]
    fn returned_model_matches_best_epoch() {
        let train = toy_windows(12, 3, 3, 2, 2, 7);
        let val = toy_windows(4, 3, 3, 2, 2, 8);
        let cfg = TrainConfig {
            epochs: 10,
            patience: 10,
            warmup_epochs: 2,
            seed: 11,
            ..TrainConfig::default()
        };
        let (model, record) = train_phase1(0, &train, &val, &tiny_cfg(2), &cfg).unwrap();
        let best_recorded = record
            .epochs
            .iter()
            .find(|e| e.epoch == record.best_epoch)
            .unwrap()
            .val_mse;
        let actual = forecast_mse(&model, &val).unwrap();
        assert!(
            (actual - best_recorded).abs() < 1e-12,
            "restored {actual} vs recorded {best_recorded}"
        );
        let min = record
            .epochs
            .iter()
            .map(|e| e.val_mse)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(best_recorded, min);
    }

    #[test]
    fn empty_sides_are_fold_errors() {
        let windows = toy_windows(4, 3, 3, 2, 2, 9);
        let cfg = TrainConfig::default();
        let err = train_phase1(2, &[], &windows, &tiny_cfg(2), &cfg).err().unwrap();
        assert!(matches!(err, Error::Fold { fold: 2, .. }), "{err}");
        let err = train_phase1(2, &windows, &[], &tiny_cfg(2), &cfg).err().unwrap();
        assert!(matches!(err, Error::Fold { fold: 2, .. }), "{err}");
    }

    #[test]
    fn missing_domain_label_is_an_error() {
        let mut train = toy_windows(4, 3, 3, 2, 2, 10);
        train[1].domain_label = None;
        let val = toy_windows(2, 3, 3, 2, 2, 11);
        let cfg = TrainConfig {
            epochs: 1,
            patience: 1,
            warmup_epochs: 0,
            ..TrainConfig::default()
        };
        let err = train_phase1(0, &train, &val, &tiny_cfg(2), &cfg).err().unwrap();
        assert!(matches!(err, Error::Training(_)), "{err}");
    }

    #[test]
    fn overfit_probe_reaches_small_loss() {
        let train = toy_windows(50, 3, 3, 1, 2, 12);
        let mut model_cfg = tiny_cfg(2);
        model_cfg.w_out = 1;
        model_cfg.grl_alpha = 0.0;
        let cfg = TrainConfig {
            epochs: 600,
            patience: 600,
            warmup_epochs: 10,
            lr_max: 8e-3,
            seed: 13,
            ..TrainConfig::default()
        };
        let (_, record) = train_phase1(0, &train, &train, &model_cfg, &cfg).unwrap();
        let best = record
            .epochs
            .iter()
            .map(|e| e.train_loss)
            .fold(f64::INFINITY, f64::min);
        assert!(best < 1e-3, "best train loss {best}");
    }

    #[test]
    fn record_serializes_and_restores() {
        let record = run_epochs(3, 2, |e| Ok((0.1, 1.0 / e as f64, 2e-4)), |_| Ok(()))
            .unwrap();
        let json = serde_json::to_string(&record).unwrap();
        assert!(json.contains("MAX_EPOCHS"));
        let back: TrainRunRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.best_epoch, record.best_epoch);
        assert_eq!(back.epochs.len(), record.epochs.len());
    }
}
