//! Two-stage training, evaluation and checkpoints.
//!
//! Stage `coarse` optimizes only CoarseNet against its own upsampled logits;
//! stage `full` starts from the best coarse epoch with fresh optimizer state
//! and optimizes everything against the fused logits.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod metrics;

pub use adam::{adam_step, Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedTensor};
pub use config::{Config, DataConfig, TrainConfig};
pub use metrics::{evaluate_head, evaluate_miou, evaluate_samples, group_rows, grouped_miou, render_group_table, EvalResult, GroupRow};

use std::fmt;
use std::io::Write;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{augment, augment_seed, make_batch, Dataset, Normalization, Sample};
use crate::error::{ensure, Error, Result};
use crate::kernels::Mode;
use crate::loss::{composite_loss, BinaryMask};
use crate::network::{ExtremeC3Net, Head, ParamScope};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Coarse,
    Full,
}

impl Stage {
    pub fn head(self) -> Head {
        match self {
            Stage::Coarse => Head::Coarse,
            Stage::Full => Head::Full,
        }
    }

    pub fn scope(self) -> ParamScope {
        match self {
            Stage::Coarse => ParamScope::Coarse,
            Stage::Full => ParamScope::All,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Coarse => "coarse",
            Stage::Full => "full",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    /// Validation mIoU, when validated this epoch.
    pub miou: Option<f64>,
}

/// Receives one record per epoch.
pub trait MetricsSink {
    fn record(&mut self, record: &EpochRecord) -> Result<()>;
}

impl MetricsSink for Vec<EpochRecord> {
    fn record(&mut self, record: &EpochRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Appends `epoch,stage,loss,miou` lines, writing the header first.
pub struct CsvSink<W: Write> {
    out: W,
}

impl<W: Write> CsvSink<W> {
    pub fn new(mut out: W) -> std::io::Result<Self> {
        writeln!(out, "epoch,stage,loss,miou")?;
        Ok(CsvSink { out })
    }
}

impl CsvSink<std::fs::File> {
    pub fn create(path: &Path) -> Result<Self> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        CsvSink::new(f).map_err(|e| Error::io(path, e))
    }
}

impl<W: Write> MetricsSink for CsvSink<W> {
    fn record(&mut self, r: &EpochRecord) -> Result<()> {
        let miou = r.miou.map(|m| format!("{m:.6}")).unwrap_or_default();
        writeln!(self.out, "{},{},{:.6},{}", r.epoch, r.stage, r.loss, miou)
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io("metrics", e))
    }
}

/// Scores the model after an epoch; the best score picks the checkpoint.
pub trait Validator {
    fn validate(&mut self, net: &ExtremeC3Net, stage: Stage, epoch: usize) -> Result<f64>;
}

/// mIoU on a fixed sample set, using the logits the stage trains.
pub struct SampleValidator<'a> {
    pub samples: &'a [Sample],
    pub norm: Normalization,
}

impl Validator for SampleValidator<'_> {
    fn validate(&mut self, net: &ExtremeC3Net, stage: Stage, _epoch: usize) -> Result<f64> {
        Ok(metrics::evaluate_head(net, self.samples, &self.norm, stage.head())?.miou)
    }
}

/// Splits off `fraction` of the samples (at least one, at most all but one)
/// by a seeded shuffle. Returns `(train, validation)`; when nothing can be
/// held out, validation is the training set itself.
pub fn split_validation(samples: &[Sample], fraction: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let n = samples.len();
    let held = ((n as f64 * fraction).floor() as usize).min(n.saturating_sub(1));
    if held == 0 {
        return (samples.to_vec(), samples.to_vec());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (val, train) = order.split_at(held);
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| samples[i].clone()).collect::<Vec<_>>()
    };
    (pick(train), pick(val))
}

/// One optimizer step on a prepared batch. Returns the loss before the
/// update.
pub fn train_step(
    net: &mut ExtremeC3Net,
    adam: &mut Adam,
    batch: &Tensor<f32>,
    masks: &[BinaryMask],
    cfg: &Config,
    stage: Stage,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.clone());
    let exec = net.forward_on_tape(&mut tape, x, stage.head(), Mode::Train, stage.scope())?;
    let loss = composite_loss(&mut tape, exec.outputs[0], masks, &cfg.loss)?;
    let value = tape.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("{stage} loss")));
    }
    tape.backward(loss)?;
    let grads = exec.param_grads(&tape);
    adam.step(net.graph_mut(), &grads)?;
    net.apply_stat_updates(&exec);
    Ok(value)
}

fn epoch_batches(
    data: &[Sample],
    cfg: &Config,
    epoch_seed: u64,
) -> Result<Vec<(Tensor<f32>, Vec<BinaryMask>)>> {
    let res = cfg.train.resolution;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(augment_seed(cfg.train.seed, epoch_seed, u64::MAX)));
    let prepared = order
        .par_iter()
        .map(|&i| {
            if cfg.train.augment {
                let seed = augment_seed(cfg.train.seed, epoch_seed, i as u64);
                Ok(augment(&data[i], &cfg.augment, seed, res, res)?.0)
            } else {
                data[i].resized(res, res)
            }
        })
        .collect::<Result<Vec<Sample>>>()?;
    prepared
        .chunks(cfg.train.batch_size)
        .map(|chunk| {
            let refs: Vec<&Sample> = chunk.iter().collect();
            make_batch(&refs, &cfg.data.normalization)
        })
        .collect()
}

/// Runs one stage for `cfg.train.epochs(stage)` epochs with fresh optimizer
/// state. The model is left holding the best-scoring epoch's weights, and
/// that epoch's checkpoint (with optimizer state) is returned. Ties keep the
/// earlier epoch.
pub fn train_stage(
    net: &mut ExtremeC3Net,
    data: &[Sample],
    validator: &mut dyn Validator,
    cfg: &Config,
    stage: Stage,
    sink: &mut dyn MetricsSink,
) -> Result<Checkpoint> {
    cfg.validate()?;
    ensure!(!data.is_empty(), "cannot train on an empty dataset");
    let epochs = cfg.train.epochs(stage);
    let mut adam = Adam::new(net.graph(), cfg.train.adam());
    let mut best: Option<Checkpoint> = None;
    // Augmentation seeds differ between stages.
    let epoch_offset = match stage {
        Stage::Coarse => 0,
        Stage::Full => cfg.train.epochs_stage1 as u64,
    };
    for epoch in 0..epochs {
        adam.config.lr = cfg.train.lr_at(epoch, epochs);
        let batches = epoch_batches(data, cfg, epoch_offset + epoch as u64)?;
        let mut total = 0.0;
        for (x, masks) in &batches {
            total += train_step(net, &mut adam, x, masks, cfg, stage)?;
        }
        let loss = total / batches.len() as f64;
        let last = epoch + 1 == epochs;
        let miou = if (epoch + 1) % cfg.train.val_every == 0 || last {
            Some(validator.validate(net, stage, epoch)?)
        } else {
            None
        };
        info!("{stage} epoch {epoch}: loss {loss:.5}{}", miou.map(|m| format!(", mIoU {m:.4}")).unwrap_or_default());
        sink.record(&EpochRecord { epoch, stage, loss, miou })?;
        if let Some(m) = miou {
            if best.as_ref().is_none_or(|b| m > b.best_miou.unwrap_or(f64::NEG_INFINITY)) {
                best = Some(Checkpoint::capture(net, Some(&adam), Some(stage), epoch, Some(m)));
            }
        }
    }
    let best = best.unwrap_or_else(|| Checkpoint::capture(net, Some(&adam), Some(stage), 0, None));
    best.restore(net)?;
    Ok(best)
}

/// Coarse stage, then the full stage from the best coarse weights. Best
/// epochs are chosen by `validator`.
pub fn train_two_stage_with(
    net: &mut ExtremeC3Net,
    data: &[Sample],
    validator: &mut dyn Validator,
    cfg: &Config,
    sink: &mut dyn MetricsSink,
) -> Result<Checkpoint> {
    if cfg.train.epochs_stage1 > 0 {
        train_stage(net, data, validator, cfg, Stage::Coarse, sink)?;
    }
    train_stage(net, data, validator, cfg, Stage::Full, sink)
}

/// [`train_two_stage_with`] validating on a seeded hold-out of
/// `cfg.train.val_fraction` of the dataset.
pub fn train_two_stage(
    net: &mut ExtremeC3Net,
    dataset: &Dataset,
    cfg: &Config,
    sink: &mut dyn MetricsSink,
) -> Result<Checkpoint> {
    ensure!(!dataset.is_empty(), "cannot train on an empty dataset");
    let (train, val) = split_validation(&dataset.samples, cfg.train.val_fraction, cfg.train.seed);
    let res = cfg.train.resolution;
    let val: Vec<Sample> = val.iter().map(|s| s.resized(res, res)).collect::<Result<_>>()?;
    let mut validator = SampleValidator { samples: &val, norm: cfg.data.normalization };
    train_two_stage_with(net, &train, &mut validator, cfg, sink)
}
