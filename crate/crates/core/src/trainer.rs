//! Joint fine-tuning loop: AdamW over exactly the trainable set, validation
//! Dice monitoring with patience-based early stopping, best-checkpoint
//! restore, and per-epoch freeze verification.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use vlsme_tensor::{AdamW, AdamWConfig, Graph};

use crate::backbone::verify_frozen;
use crate::data::{iterate_batches, DataError, DatasetManifest, PromptPolicy, Sample, Split};
use crate::ensemble::{stack_batch, EnsembleError, EnsembleModel};
use crate::losses::{combined_loss, dice_score, LossConfig, LossError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] EnsembleError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("loss is not finite on batch [{}]", batch_ids.join(", "))]
    NanLoss { batch_ids: Vec<String> },
    #[error("non-finite gradient in parameter {param}")]
    GradientAnomaly { param: String },
    #[error("frozen parameter violated: {0}")]
    FreezeViolation(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    #[default]
    ValDice,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub monitor: Monitor,
    #[serde(default)]
    pub loss: LossConfig,
}

fn default_lr() -> f32 {
    1e-5
}
fn default_batch_size() -> usize {
    crate::data::DEFAULT_BATCH_SIZE
}
fn default_patience() -> usize {
    20
}
fn default_max_epochs() -> usize {
    500
}
fn default_weight_decay() -> f32 {
    1e-2
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: default_lr(),
            batch_size: default_batch_size(),
            patience: default_patience(),
            max_epochs: default_max_epochs(),
            weight_decay: default_weight_decay(),
            seed: 0,
            monitor: Monitor::ValDice,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr <= 0.0 {
            return Err(TrainError::Loss(LossError::Config("lr must be > 0".into())));
        }
        if self.patience == 0 {
            return Err(TrainError::Loss(LossError::Config("patience must be >= 1".into())));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Data(DataError::BadBatchSize));
        }
        self.loss.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub val_dice: f32,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub history_path: PathBuf,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_dice: f32,
    pub stopped_epoch: usize,
}

/// One optimizer step: forward on the final logits, combined loss, backward,
/// AdamW update of the trainable set only.
pub fn step(
    model: &mut EnsembleModel,
    batch: &[Sample],
    optimizer: &mut AdamW,
    loss_config: &LossConfig,
    trainable: &BTreeSet<String>,
) -> Result<f32, TrainError> {
    let (images, masks, prompts) = stack_batch(batch);
    let mut g = Graph::new();
    let out = model.forward(&mut g, &images, &prompts, true)?;
    let loss = combined_loss(&mut g, loss_config, out.final_logits, &masks)?;
    let loss_value = g.scalar(loss);
    if !loss_value.is_finite() {
        return Err(TrainError::NanLoss {
            batch_ids: batch.iter().map(|s| s.image_id.clone()).collect(),
        });
    }
    let grads = g.backward(loss).into_param_grads();
    for (name, grad) in &grads {
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::GradientAnomaly { param: name.clone() });
        }
    }
    optimizer.step(model.store_mut(), &grads, trainable);
    Ok(loss_value)
}

/// Mean hard Dice over the validation split, first prompt template fixed.
pub fn validation_dice(
    model: &mut EnsembleModel,
    manifest: &DatasetManifest,
    batch_size: usize,
) -> Result<f32, TrainError> {
    let resolution = model.config.resolution;
    let iter = iterate_batches(
        manifest,
        Split::Val,
        batch_size,
        0,
        PromptPolicy::Fixed(0),
        resolution,
    )?;
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for batch in iter {
        let batch = batch?;
        let (images, _, prompts) = stack_batch(&batch);
        let logits = model.predict(&images, &prompts)?;
        for (i, sample) in batch.iter().enumerate() {
            let one = logits
                .index_axis(ndarray::Axis(0), i)
                .to_owned()
                .into_shape_with_order(ndarray::IxDyn(&[resolution, resolution]))
                .unwrap();
            let d = dice_score(&one, &sample.mask.clone().into_dyn(), 0.5)?;
            sum += d.value as f64;
            count += 1;
        }
    }
    Ok((sum / count.max(1) as f64) as f32)
}

/// Fine-tune with the real validation pass.
pub fn train(
    model: &mut EnsembleModel,
    manifest: &DatasetManifest,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    let batch_size = config.batch_size;
    train_with_validator(model, manifest, config, out_dir, |m, _| {
        validation_dice(m, manifest, batch_size)
    })
}

/// Fine-tune with an injected validation scorer. This is the extension/test
/// hook: scripted scorers drive the early-stopping contract tests.
pub fn train_with_validator<F>(
    model: &mut EnsembleModel,
    manifest: &DatasetManifest,
    config: &TrainConfig,
    out_dir: &Path,
    mut validator: F,
) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(&mut EnsembleModel, usize) -> Result<f32, TrainError>,
{
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|source| TrainError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let best_path = out_dir.join("best.vck");
    let history_path = out_dir.join("history.csv");

    let trainable = model.trainable_parameters();
    let mut optimizer = AdamW::new(AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..Default::default()
    });
    let frozen_before = model.freeze_report();
    let resolution = model.config.resolution;

    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best_val = f32::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut since_improvement = 0usize;
    let mut stopped_epoch = 0usize;

    for epoch in 1..=config.max_epochs {
        let epoch_seed = config.seed.wrapping_add((epoch as u64).wrapping_mul(0x9E3779B9));
        let iter = iterate_batches(
            manifest,
            Split::Train,
            config.batch_size,
            epoch_seed,
            PromptPolicy::RandomPerEpoch,
            resolution,
        )?;
        let mut total = 0.0f64;
        let mut count = 0usize;
        for batch in iter {
            let batch = batch?;
            let loss = step(model, &batch, &mut optimizer, &config.loss, &trainable)?;
            total += loss as f64 * batch.len() as f64;
            count += batch.len();
        }
        let train_loss = (total / count.max(1) as f64) as f32;

        let val_dice = validator(model, epoch)?;
        verify_frozen(&frozen_before, &model.freeze_report())
            .map_err(TrainError::FreezeViolation)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_dice,
        });

        // strict improvement; ties do not reset the counter
        if val_dice > best_val {
            best_val = val_dice;
            best_epoch = epoch;
            since_improvement = 0;
            model.save_checkpoint(&best_path)?;
        } else {
            since_improvement += 1;
        }
        stopped_epoch = epoch;
        if since_improvement >= config.patience {
            break;
        }
    }

    write_history(&history_path, &history)?;
    if best_epoch > 0 {
        model.restore_checkpoint(&best_path)?;
    }
    Ok(TrainOutcome {
        best_checkpoint: best_path,
        history_path,
        history,
        best_epoch,
        best_val_dice: best_val,
        stopped_epoch,
    })
}

fn write_history(path: &Path, history: &[EpochRecord]) -> Result<(), TrainError> {
    let io = |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    writeln!(f, "epoch,train_loss,val_dice").map_err(io)?;
    for r in history {
        writeln!(f, "{},{:.6},{:.6}", r.epoch, r.train_loss, r.val_dice).map_err(io)?;
    }
    Ok(())
}
