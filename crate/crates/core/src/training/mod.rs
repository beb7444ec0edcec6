//! Preprocessing, denoising score-matching loss and the optimisation loop.

mod adam;
mod loss;
mod preprocess;

pub use adam::{clip_grad_norm, warmup_lr, Adam};
pub use loss::{decompose, dsm_loss, loss_and_gradient, model_loss, noise_batch, LossReport, NoisedBatch};
pub use preprocess::{ChannelScaling, Preprocessor, Range};

use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::Field;
use crate::score::unet::write_checkpoint;
use crate::score::{ScoreModel, UNetScore};
use crate::sde::DEFAULT_T_END;

/// Loss above this for `DIVERGENCE_PATIENCE` consecutive steps aborts training.
pub const DIVERGENCE_LOSS: f64 = 1e4;
pub const DIVERGENCE_PATIENCE: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub validation_fraction: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: 1.0,
            warmup_steps: 5000,
            batch_size: 4,
            epochs: 125,
            dropout: 0.5,
            validation_fraction: 0.1,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.adam_eps, self.grad_clip_norm];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter("learning_rate, adam_eps and grad_clip_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidParameter("Adam betas must lie in [0, 1)".into()));
        }
        if self.warmup_steps < 1 || self.batch_size < 1 || self.epochs < 1 {
            return Err(Error::InvalidParameter("warmup_steps, batch_size and epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidParameter(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidParameter(format!("validation_fraction {} outside [0, 1)", self.validation_fraction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: LossReport,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub validation: Option<LossReport>,
}

/// Where and whether to write checkpoints while training.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory receiving `last.bckp` after each epoch and `best.bckp`
    /// whenever validation loss improves.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub history: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    /// Set when training stopped early; the history up to that point is kept.
    pub aborted: Option<Error>,
}

pub fn write_loss_csv(history: &[StepRecord], mut out: impl Write) -> Result<()> {
    writeln!(out, "step,lr,total,mean_component,fluct_component")?;
    for r in history {
        writeln!(out, "{},{:e},{:e},{:e},{:e}", r.step, r.lr, r.loss.total, r.loss.mean_component, r.loss.fluct_component)?;
    }
    Ok(())
}

/// Splits off the trailing `fraction` of samples (after a seeded shuffle)
/// as a validation set.
pub fn split_validation(data: &Field, fraction: f64, seed: u64) -> (Field, Option<Field>) {
    let n = data.samples();
    let n_val = ((n as f64) * fraction).round() as usize;
    if n_val == 0 || n_val >= n {
        return (data.clone(), None);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5a11));
    let (train, val) = idx.split_at(n - n_val);
    (data.select_samples(train), Some(data.select_samples(val)))
}

/// Trains `model` in place on preprocessed `data`. On return the model
/// holds the best-by-validation parameters when a validation split exists,
/// otherwise the final ones.
pub fn train(model: &mut UNetScore, data: &Field, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.samples() == 0 {
        return Err(Error::EmptySet);
    }
    if data.n() != model.n_grid() {
        return Err(Error::InvalidGrid(format!("model built for N = {}, data has N = {}", model.n_grid(), data.n())));
    }
    model.set_dropout(cfg.dropout)?;
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let (train_set, val_set) = split_validation(data, cfg.validation_fraction, cfg.rng_seed);
    let noised = model.noised_channels().to_vec();
    // Fixed validation noise so epochs are comparable.
    let val_batch = match &val_set {
        Some(v) => Some(noise_batch(v, &noised, model.schedule(), DEFAULT_T_END, &mut ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x7a1))?),
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut adam = Adam::new(model.params().len(), cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut outcome = TrainOutcome { history: Vec::new(), epochs: Vec::new(), best_epoch: None, aborted: None };
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut over_limit = 0usize;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train_set.samples()).collect();

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let x0 = train_set.select_samples(chunk);
            let batch = noise_batch(&x0, &noised, model.schedule(), DEFAULT_T_END, &mut rng)?;
            let seeds: Vec<u64> = (0..chunk.len()).map(|_| rng.next_u64()).collect();
            let (loss, mut grad) = loss_and_gradient(model, &batch, &seeds)?;
            if !loss.total.is_finite() {
                outcome.aborted = Some(Error::NonFiniteLoss { step });
                break 'epochs;
            }
            let lr = warmup_lr(cfg.learning_rate, cfg.warmup_steps, step);
            let grad_norm = clip_grad_norm(&mut grad, cfg.grad_clip_norm);
            adam.step(model.params_mut(), &grad, lr);
            outcome.history.push(StepRecord { step, lr, loss, grad_norm });
            log::debug!("step {step} lr {lr:.3e} loss {:.4e}", loss.total);
            over_limit = if loss.total > DIVERGENCE_LOSS { over_limit + 1 } else { 0 };
            if over_limit >= DIVERGENCE_PATIENCE {
                outcome.aborted = Some(Error::Diverged { step });
                break 'epochs;
            }
        }

        let validation = match &val_batch {
            Some(b) => Some(model_loss(model, b)?),
            None => None,
        };
        outcome.epochs.push(EpochRecord { epoch, validation });
        log::info!("epoch {epoch}: validation {:?}", validation.map(|v| v.total));
        if let Some(dir) = &opts.checkpoint_dir {
            write_checkpoint(model, &dir.join("last.bckp"), true)?;
        }
        if let Some(v) = validation {
            if best.as_ref().is_none_or(|(b, _)| v.total < *b) {
                best = Some((v.total, model.params().to_vec()));
                outcome.best_epoch = Some(epoch);
                if let Some(dir) = &opts.checkpoint_dir {
                    write_checkpoint(model, &dir.join("best.bckp"), true)?;
                }
            }
        }
    }
    if let Some((_, params)) = best {
        model.params_mut().copy_from_slice(&params);
    }
    Ok(outcome)
}
