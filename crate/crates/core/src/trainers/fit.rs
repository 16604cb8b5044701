//! The epoch loop shared by every trainer.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{count_correct, Batch, Sgd, Supervision, Trainer};
use crate::data::{Dataset, Split};
use crate::encoding::EncoderSpec;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Multiply by `gamma` every `every` epochs.
    Step { every: usize, gamma: f32 },
    /// Multiply by `gamma` every epoch.
    Exponential { gamma: f32 },
    /// Half-cosine from the base rate down to `min_factor` of it.
    Cosine {
        #[serde(default)]
        min_factor: f32,
    },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::Constant => Ok(()),
            LrSchedule::Step { every, gamma } => {
                if every == 0 || !(gamma > 0.0) {
                    return Err(Error::Config(format!(
                        "step schedule needs every > 0 and gamma > 0, got {every} and {gamma}"
                    )));
                }
                Ok(())
            }
            LrSchedule::Exponential { gamma } if gamma > 0.0 => Ok(()),
            LrSchedule::Exponential { gamma } => Err(Error::Config(format!("gamma must be positive, got {gamma}"))),
            LrSchedule::Cosine { min_factor } if (0.0..=1.0).contains(&min_factor) => Ok(()),
            LrSchedule::Cosine { min_factor } => {
                Err(Error::Config(format!("min_factor must be in [0,1], got {min_factor}")))
            }
        }
    }

    /// Multiplier for zero-based epoch `e` of `epochs`.
    pub fn factor(&self, e: usize, epochs: usize) -> f32 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Step { every, gamma } => gamma.powi((e / every.max(1)) as i32),
            LrSchedule::Exponential { gamma } => gamma.powi(e as i32),
            LrSchedule::Cosine { min_factor } => {
                if epochs <= 1 {
                    return 1.0;
                }
                let p = e as f32 / (epochs - 1) as f32;
                min_factor + (1.0 - min_factor) * 0.5 * (1.0 + (std::f32::consts::PI * p).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub encoder: EncoderSpec,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    /// Train samples used for the epoch-0 train accuracy and for trainers
    /// that report no running accuracy.
    #[serde(default = "default_train_eval")]
    pub train_eval_samples: usize,
    /// Train samples used to label neurons for rules that need it.
    #[serde(default = "default_calibration")]
    pub calibration_samples: usize,
}

fn default_eval_batch() -> usize {
    256
}
fn default_train_eval() -> usize {
    2000
}
fn default_calibration() -> usize {
    10_000
}

impl FitConfig {
    pub fn new(epochs: usize, batch_size: usize, encoder: EncoderSpec) -> Self {
        FitConfig {
            epochs,
            batch_size,
            encoder,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
            eval_batch_size: default_eval_batch(),
            train_eval_samples: default_train_eval(),
            calibration_samples: default_calibration(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        self.encoder.validate()?;
        self.lr_schedule.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Mean training loss, absent before training and for loss-free rules.
    pub loss: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub aux_memory_bytes: usize,
    pub wall_ms: u64,
}

impl TrainingLog {
    pub fn final_test_acc(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.test_acc)
    }

    pub fn best_test_acc(&self) -> f64 {
        self.epochs.iter().map(|e| e.test_acc).fold(0.0, f64::max)
    }

    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch logs serialize") + "\n")
            .collect()
    }
}

/// Optional interruption flag and per-epoch observer.
#[derive(Default)]
pub struct FitHooks<'a> {
    pub cancel: Option<&'a AtomicBool>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochLog)>,
}

impl FitHooks<'_> {
    fn check(&self) -> Result<()> {
        match self.cancel {
            Some(flag) if flag.load(Ordering::Relaxed) => Err(Error::Interrupted),
            _ => Ok(()),
        }
    }
}

const SHUFFLE_STREAM: u64 = 1 << 20;
const ENCODE_STREAM: u64 = 2 << 20;
const EVAL_STREAM: u64 = 3 << 20;
const CALIBRATE_STREAM: u64 = 4 << 20;

/// Fails before any training when the trainer, model and data disagree.
pub fn check_compatible(trainer: &dyn Trainer, model: &Model, data: &Dataset) -> Result<()> {
    trainer.meta().ensure(model.spec())?;
    if model.input_size() != data.input_size() {
        return Err(Error::Incompatible(format!(
            "model {} takes {} inputs, dataset {} has {}",
            model.name(),
            model.input_size(),
            data.name(),
            data.input_size()
        )));
    }
    if trainer.meta().supervision != Supervision::Unsupervised && model.output_size() < data.classes() {
        return Err(Error::Incompatible(format!(
            "model {} has {} outputs for {} classes",
            model.name(),
            model.output_size(),
            data.classes()
        )));
    }
    Ok(())
}

/// Accuracy of `trainer.predict` on up to `limit` samples of a split.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    trainer: &dyn Trainer,
    model: &Model,
    data: &Dataset,
    split: Split,
    limit: Option<usize>,
    encoder: &EncoderSpec,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let all = data.indices(split);
    let order = all[..limit.unwrap_or(all.len()).min(all.len())].to_vec();
    let mut correct = 0usize;
    let mut seen = 0usize;
    for b in data.batches_over(order, batch_size)? {
        let x = data.spike_input(&b.indices, encoder, rng)?;
        let pred = trainer.predict(model, &x)?;
        correct += count_correct(&pred, &b.labels);
        seen += b.labels.len();
    }
    Ok(if seen == 0 { 0.0 } else { correct as f64 / seen as f64 })
}

fn calibrate(trainer: &mut dyn Trainer, model: &Model, data: &Dataset, cfg: &FitConfig, rng: &mut Rng) -> Result<()> {
    trainer.reset_calibration();
    let all = data.train_indices();
    let order = all[..cfg.calibration_samples.min(all.len())].to_vec();
    for b in data.batches_over(order, cfg.eval_batch_size)? {
        let x = data.spike_input(&b.indices, &cfg.encoder, rng)?;
        trainer.calibrate(model, &Batch::new(x, b.labels))?;
    }
    Ok(())
}

pub fn fit(
    trainer: &mut dyn Trainer,
    opt: &mut Sgd,
    model: &mut Model,
    data: &Dataset,
    cfg: &FitConfig,
) -> Result<TrainingLog> {
    fit_with(trainer, opt, model, data, cfg, FitHooks::default())
}

/// Trains for `cfg.epochs` epochs. Entry 0 of the log is the untrained
/// model; every later entry follows one pass over the train split.
pub fn fit_with(
    trainer: &mut dyn Trainer,
    opt: &mut Sgd,
    model: &mut Model,
    data: &Dataset,
    cfg: &FitConfig,
    mut hooks: FitHooks<'_>,
) -> Result<TrainingLog> {
    cfg.validate()?;
    check_compatible(trainer, model, data)?;
    if data.train_indices().is_empty() {
        return Err(Error::Argument(format!(
            "dataset {} has an empty train split",
            data.name()
        )));
    }
    let start = Instant::now();
    let root = Rng::new(cfg.seed);
    let base_lr = trainer.lr();
    trainer.prepare(model)?;
    let mut log = TrainingLog::default();

    for epoch in 0..=cfg.epochs {
        let t0 = Instant::now();
        let mut running: Option<(usize, usize)> = None;
        let mut loss_sum = 0.0f64;
        let mut loss_n = 0usize;
        if epoch > 0 {
            trainer.set_lr(base_lr * cfg.lr_schedule.factor(epoch - 1, cfg.epochs));
            let e = epoch as u64;
            let mut shuffle = root.split(SHUFFLE_STREAM + e);
            let mut enc = root.split(ENCODE_STREAM + e);
            for b in data.batches(Split::Train, cfg.batch_size, Some(&mut shuffle))? {
                hooks.check()?;
                let x = data.spike_input(&b.indices, &cfg.encoder, &mut enc)?;
                let n = b.labels.len();
                let update = trainer.step(model, &Batch::new(x, b.labels))?;
                update.deltas.check_finite()?;
                opt.apply(model, &update)?;
                trainer.post_apply(model)?;
                if let Some(c) = update.diagnostic("correct") {
                    let r = running.get_or_insert((0, 0));
                    r.0 += c as usize;
                    r.1 += n;
                }
                if let Some(l) = update.diagnostic("loss") {
                    if !l.is_finite() {
                        return Err(Error::Numeric(format!("loss became {l} in epoch {epoch}")));
                    }
                    loss_sum += l * n as f64;
                    loss_n += n;
                }
            }
        }
        hooks.check()?;
        if trainer.needs_calibration() {
            calibrate(
                trainer,
                model,
                data,
                cfg,
                &mut root.split(CALIBRATE_STREAM + epoch as u64),
            )?;
        }
        let mut eval = root.split(EVAL_STREAM + epoch as u64);
        let train_acc = match running {
            Some((c, n)) if n > 0 => c as f64 / n as f64,
            _ => evaluate(
                trainer,
                model,
                data,
                Split::Train,
                Some(cfg.train_eval_samples),
                &cfg.encoder,
                cfg.eval_batch_size,
                &mut eval,
            )?,
        };
        let test_acc = evaluate(
            trainer,
            model,
            data,
            Split::Test,
            None,
            &cfg.encoder,
            cfg.eval_batch_size,
            &mut eval,
        )?;
        let entry = EpochLog {
            epoch,
            train_acc,
            test_acc,
            loss: (loss_n > 0).then(|| loss_sum / loss_n as f64),
            wall_ms: t0.elapsed().as_millis() as u64,
        };
        if let Some(f) = hooks.on_epoch.as_mut() {
            f(&entry);
        }
        log.epochs.push(entry);
    }
    trainer.set_lr(base_lr);
    log.aux_memory_bytes = trainer.aux_memory_bytes();
    log.wall_ms = start.elapsed().as_millis() as u64;
    Ok(log)
}
