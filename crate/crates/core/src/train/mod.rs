//! Optimization loop: RAdam, exponential learning-rate decay, validation,
//! best-epoch tracking and resumable checkpoints.

mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use optim::{lr_schedule, radam_step, step_coefficients, OptimState, RAdamConfig, StepCoefficients};

use crate::autograd::{Mode, Tape};
use crate::data::{Batch, Loader};
use crate::error::{Error, Result};
use crate::model::{SaUNet, OPTIM_PREFIX};
use crate::objectives::{
    cross_entropy, dice_loss, edge_bce, total_loss, LossWeights, MetricAccumulator, MetricReport, MetricRow,
};
use crate::tensor::{LabelMap, Tensor};

pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Per-epoch decay factor of the learning rate.
    pub gamma: f64,
    pub optimizer: RAdamConfig,
    pub loss: LossWeights,
    pub seed: u64,
    /// Write `last.ckpt` every this many epochs; 0 writes it only at the end.
    pub checkpoint_every: usize,
    pub augment: bool,
    /// Threads preparing samples; results do not depend on it.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr0: 5e-4,
            gamma: 0.99,
            optimizer: RAdamConfig::default(),
            loss: LossWeights::default(),
            seed: 0,
            checkpoint_every: 1,
            augment: true,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2 for batch norm, got {}", self.batch_size)));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be finite and ≥ 0, got {}", self.lr0)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        self.optimizer.validate()?;
        self.loss.validate()
    }
}

/// Loss components of one batch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchLoss {
    pub ids: Vec<String>,
    pub ce: f64,
    pub dice_loss: f64,
    pub edge: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub dice_loss: f64,
    pub edge: f64,
    pub total: f64,
    pub batches: Vec<BatchLoss>,
}

/// One JSON-lines record of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogLine {
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub dice_loss: f64,
    pub edge: f64,
    /// Validation Dice per class, background first.
    pub val_dice: Vec<f64>,
}

/// Forward, loss, backward and optimizer step for one batch.
fn batch_step(model: &mut SaUNet<f32>, batch: &Batch, weights: &LossWeights, optim: &mut OptimState, lr: f64) -> Result<BatchLoss> {
    let tape = Tape::new();
    let canny = model.config().shape_stream.then_some(&batch.canny);
    let pass = model.forward(&tape, &batch.image, canny, Mode::Train)?;
    let out = &pass.out;
    let ce = cross_entropy(out.seg_logits, &batch.target)?;
    let dice = dice_loss(out.seg_logits.softmax_channels()?, &batch.target)?;
    let edge = out.edge_logits.map(|e| edge_bce(e, &batch.boundary)).transpose()?;
    let total = total_loss(ce, dice, edge, weights)?;
    let loss = BatchLoss {
        ids: batch.ids.clone(),
        ce: ce.item() as f64,
        dice_loss: dice.item() as f64,
        edge: edge.map_or(0.0, |e| e.item() as f64),
        total: total.item() as f64,
    };
    if !loss.total.is_finite() {
        return Err(Error::NonFinite(format!("training loss on batch [{}]", batch.ids.join(", "))));
    }
    let mut grads = tape.backward(total)?;
    let g = pass.bound.take_grads(&mut grads);
    let bn = pass.bound.bn_updates;
    radam_step(optim, &mut model.params, &g, lr).map_err(|e| match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} on batch [{}]", batch.ids.join(", "))),
        other => other,
    })?;
    model.params.apply_bn_updates(bn);
    Ok(loss)
}

/// Runs every batch of `epoch` through forward, loss, backward and an
/// optimizer step at learning rate `lr`.
pub fn train_epoch(
    model: &mut SaUNet<f32>,
    loader: &Loader,
    optim: &mut OptimState,
    weights: &LossWeights,
    epoch: usize,
    lr: f64,
) -> Result<EpochStats> {
    let mut batches = Vec::with_capacity(loader.num_batches());
    for batch in loader.epoch(epoch) {
        batches.push(batch_step(model, &batch?, weights, optim, lr)?);
    }
    let n = batches.len().max(1) as f64;
    let mean = |f: fn(&BatchLoss) -> f64| batches.iter().map(f).sum::<f64>() / n;
    Ok(EpochStats {
        epoch,
        lr,
        ce: mean(|b| b.ce),
        dice_loss: mean(|b| b.dice_loss),
        edge: mean(|b| b.edge),
        total: mean(|b| b.total),
        batches,
    })
}

/// Eval-mode predictions of a batch, one label map per sample.
pub fn predict(model: &SaUNet<f32>, batch: &Batch) -> Result<Vec<LabelMap>> {
    let tape = Tape::no_grad();
    let canny = model.config().shape_stream.then_some(&batch.canny);
    let pass = model.forward(&tape, &batch.image, canny, Mode::Eval)?;
    let logits = pass.out.seg_logits.value();
    (0..batch.len()).map(|n| LabelMap::argmax(&logits, n)).collect()
}

/// Metrics over every sample of `loader` plus the per-sample rows.
pub fn evaluate(model: &SaUNet<f32>, loader: &Loader) -> Result<(MetricReport, Vec<MetricRow>)> {
    let classes = model.config().num_classes;
    if loader.classes != classes {
        return Err(Error::Data(format!("dataset has {} classes, model predicts {classes}", loader.classes)));
    }
    let mut acc = MetricAccumulator::new(classes);
    for batch in loader.epoch(0) {
        let batch = batch?;
        for ((id, truth), pred) in batch.ids.iter().zip(&batch.labels).zip(predict(model, &batch)?) {
            acc.add(id, &pred, truth);
        }
    }
    Ok((acc.report(), acc.rows().to_vec()))
}

pub fn validate(model: &SaUNet<f32>, loader: &Loader) -> Result<MetricReport> {
    Ok(evaluate(model, loader)?.0)
}

/// Model, optimizer and progress of a training run.
pub struct Trainer {
    pub model: SaUNet<f32>,
    pub optim: OptimState,
    pub config: TrainConfig,
    /// Next epoch to run.
    pub epoch: usize,
    /// Best validation mean Dice so far and its epoch.
    pub best: Option<(usize, f64)>,
}

impl Trainer {
    pub fn new(model: SaUNet<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            optim: OptimState::new(&model.params, config.optimizer),
            model,
            config,
            epoch: 0,
            best: None,
        })
    }

    pub fn lr(&self) -> f64 {
        lr_schedule(self.config.lr0, self.config.gamma, self.epoch)
    }

    pub fn train_loader(&self, samples: Vec<crate::data::RawSlice>) -> Loader {
        Loader {
            samples,
            classes: self.model.config().num_classes,
            batch_size: self.config.batch_size,
            seed: self.config.seed ^ 0x10ad,
            shuffle: true,
            augment: self.config.augment,
            workers: self.config.workers,
        }
    }

    /// Trains one epoch and advances the epoch counter.
    pub fn step_epoch(&mut self, loader: &Loader) -> Result<EpochStats> {
        let lr = self.lr();
        let stats = train_epoch(&mut self.model, loader, &mut self.optim, &self.config.loss, self.epoch, lr)?;
        self.epoch += 1;
        Ok(stats)
    }

    fn progress_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut extra = self.optim.to_named(&self.model.params);
        extra.push((format!("{OPTIM_PREFIX}epoch"), Tensor::scalar(self.epoch as f32)));
        if let Some((e, d)) = self.best {
            extra.push((format!("{OPTIM_PREFIX}best"), Tensor::new([2], vec![e as f32, d as f32]).expect("2 values")));
        }
        extra
    }

    /// Parameters, optimizer moments and progress in one container.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.model.save(path, &self.progress_tensors())
    }

    /// Continues a run saved by [`save`](Self::save).
    pub fn resume(path: &Path, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, extra) = SaUNet::load(path)?;
        let optim = OptimState::load_named(&model.params, config.optimizer, &extra)?;
        let get = |k: &str| extra.iter().find(|(n, _)| n == &format!("{OPTIM_PREFIX}{k}")).map(|(_, t)| t);
        let epoch = get("epoch")
            .ok_or_else(|| Error::Data(format!("{}: no epoch counter", path.display())))?
            .item() as usize;
        let best = get("best").map(|t| (t.data()[0] as usize, t.data()[1] as f64));
        Ok(Trainer {
            model,
            optim,
            config,
            epoch,
            best,
        })
    }
}

/// Outcome of [`fit`].
#[derive(Clone, Debug)]
pub struct FitSummary {
    pub epochs: Vec<EpochStats>,
    pub reports: Vec<MetricReport>,
    pub best: Option<(usize, f64)>,
}

/// Trains until `config.epochs`, validating after each epoch. With `out`,
/// writes the JSON-lines log, `best.ckpt` on each new best validation mean
/// Dice and `last.ckpt` at the configured cadence and at the end.
pub fn fit(trainer: &mut Trainer, train: &Loader, val: &Loader, out: Option<&Path>) -> Result<FitSummary> {
    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join(LOG_FILE);
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(trainer.epoch > 0)
                .write(true)
                .truncate(trainer.epoch == 0)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            Some((p, f))
        }
        None => None,
    };
    let path_in = |name: &str| out.map(|d| d.join(name)).unwrap_or_else(|| PathBuf::from(name));
    let mut summary = FitSummary {
        epochs: Vec::new(),
        reports: Vec::new(),
        best: trainer.best,
    };
    while trainer.epoch < trainer.config.epochs {
        let stats = trainer.step_epoch(train)?;
        let report = if val.samples.is_empty() { None } else { Some(validate(&trainer.model, val)?) };
        let line = LogLine {
            epoch: stats.epoch,
            lr: stats.lr,
            ce: stats.ce,
            dice_loss: stats.dice_loss,
            edge: stats.edge,
            val_dice: report.as_ref().map(|r| r.dice.clone()).unwrap_or_default(),
        };
        log::info!(
            "epoch {} lr {:.3e} loss {:.4} (ce {:.4} dice {:.4} edge {:.4}) val mean dice {}",
            stats.epoch,
            stats.lr,
            stats.total,
            stats.ce,
            stats.dice_loss,
            stats.edge,
            report.as_ref().map_or("-".into(), |r| format!("{:.4}", r.mean_dice))
        );
        let score = report.as_ref().map_or(-stats.total, |r| r.mean_dice);
        let improved = trainer.best.map_or(true, |(_, b)| score > b);
        if improved {
            trainer.best = Some((stats.epoch, score));
        }
        if let Some((p, f)) = log.as_mut() {
            let text = serde_json::to_string(&line).expect("log line serializes");
            writeln!(f, "{text}").map_err(|e| Error::io(&*p, e))?;
        }
        if out.is_some() {
            if improved {
                trainer.save(&path_in(BEST_CKPT))?;
            }
            let every = trainer.config.checkpoint_every;
            if trainer.epoch == trainer.config.epochs || (every > 0 && trainer.epoch % every == 0) {
                trainer.save(&path_in(LAST_CKPT))?;
            }
        }
        summary.epochs.push(stats);
        summary.reports.extend(report);
    }
    summary.best = trainer.best;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_rng, synth_sample, RawSlice, TextureFamily, TARGET_SPACING};
    use crate::model::ModelConfig;

    fn slices(n: usize, size: usize, seed: u64) -> Vec<RawSlice> {
        (0..n)
            .map(|i| {
                let (image, labels) = synth_sample(size, TextureFamily::A, &mut sample_rng(seed, i as u64));
                let lo = image.min_max().0;
                let image = crate::data::Plane {
                    data: image.data.iter().map(|v| v - lo).collect(),
                    ..image
                };
                RawSlice {
                    id: format!("t{i}"),
                    image,
                    labels,
                    spacing: TARGET_SPACING,
                }
            })
            .collect()
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            encoder_blocks: vec![1, 1, 1, 1],
            ..ModelConfig::tiny()
        }
    }

    fn trainer(cfg: TrainConfig) -> Trainer {
        Trainer::new(SaUNet::build(&small_config(), cfg.seed).unwrap(), cfg).unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            lr0: 1e-3,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn logged_total_is_sum_of_components() {
        let mut t = trainer(cfg());
        let loader = t.train_loader(slices(4, 16, 1));
        let stats = t.step_epoch(&loader).unwrap();
        assert_eq!(stats.batches.len(), 2);
        for b in &stats.batches {
            assert!((b.total - (b.ce + b.dice_loss + b.edge)).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_lr_without_decay_leaves_parameters() {
        let mut c = cfg();
        c.lr0 = 0.0;
        c.optimizer.weight_decay = 0.0;
        let mut t = trainer(c);
        let before: Vec<Tensor<f32>> = t.model.params.trainable().map(|id| t.model.params.value(id).clone()).collect();
        let loader = t.train_loader(slices(4, 16, 1));
        t.step_epoch(&loader).unwrap();
        let after: Vec<Tensor<f32>> = t.model.params.trainable().map(|id| t.model.params.value(id).clone()).collect();
        assert_eq!(before, after);
        assert_eq!(t.optim.step, 2);
    }

    #[test]
    fn epochs_are_bit_reproducible_and_resumable() {
        let data = slices(4, 16, 2);
        let run = || {
            let mut t = trainer(cfg());
            let loader = t.train_loader(data.clone());
            (0..3).map(|_| t.step_epoch(&loader).unwrap().total.to_bits()).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());

        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("mid.ckpt");
        let mut t = trainer(cfg());
        let loader = t.train_loader(data.clone());
        t.step_epoch(&loader).unwrap();
        t.save(&ckpt).unwrap();
        let mut r = Trainer::resume(&ckpt, cfg()).unwrap();
        assert_eq!(r.epoch, 1);
        let rest: Vec<u64> = (0..2).map(|_| r.step_epoch(&loader).unwrap().total.to_bits()).collect();
        assert_eq!(rest, a[1..]);
    }

    #[test]
    fn fit_writes_log_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = trainer(cfg());
        let train = t.train_loader(slices(4, 16, 4));
        let val = Loader::eval(slices(2, 16, 5), 4, 2);
        let s = fit(&mut t, &train, &val, Some(dir.path())).unwrap();
        assert_eq!(s.epochs.len(), 2);
        let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        let lines: Vec<LogLine> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1].val_dice.len(), 4);
        assert!(dir.path().join(BEST_CKPT).exists());
        assert!(dir.path().join(LAST_CKPT).exists());
        let keys: Vec<String> = serde_json::from_str::<serde_json::Value>(log.lines().next().unwrap())
            .unwrap()
            .as_object()
            .unwrap()
            .keys()
            .cloned()
            .collect();
        assert_eq!(keys.len(), 6);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.validate().unwrap();
        c.batch_size = 1;
        assert!(c.validate().is_err());
        let json = r#"{"epochs": 3, "bogus": 1}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(c.batch_size, 8);
    }
}
