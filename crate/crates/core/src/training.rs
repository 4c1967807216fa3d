//! Minibatch training with AdamW, best-validation checkpointing, early
//! stopping and a line-oriented JSON epoch log.
//!
//! Random streams are derived from the run seed: stream 0 initialises the
//! model, stream 1 drives dropout and stream 2 shuffles minibatches.

use std::io::Write;
use std::time::Instant;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{MetricAccumulator, Split, WindowSample, WindowedData};
use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::model::{ModelConfig, SentinelModel};
use crate::optim::{clip_grad_norm, zero_grad, AdamW, AdamWConfig};
use crate::rng::Rng;
use crate::tensor::{no_grad, Tensor};

const DROPOUT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L1,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub loss: LossKind,
    pub seeds: Vec<u64>,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub grad_clip: Option<f64>,
    /// Cosine decay of the learning rate to zero over the planned steps.
    pub cosine: bool,
    /// Caps minibatches per epoch (smoke runs).
    pub max_batches_per_epoch: Option<usize>,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 5e-4,
            weight_decay: 1e-4,
            loss: LossKind::L1,
            seeds: vec![0],
            patience: 5,
            grad_clip: None,
            cosine: false,
            max_batches_per_epoch: None,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("training.epochs must be positive".into());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("training.batch_size and training.eval_batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("training.lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("training.weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.seeds.is_empty() {
            return bad("training.seeds must not be empty".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("training.grad_clip must be positive, got {c}"));
            }
        }
        if self.max_batches_per_epoch == Some(0) {
            return bad("training.max_batches_per_epoch must be positive".into());
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

fn check_same_shape(op: &'static str, pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            op,
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    Ok(())
}

/// Mean absolute error over every element.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same_shape("l1_loss", pred, target)?;
    Ok(pred.sub(target)?.abs().mean_all())
}

pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same_shape("mse_loss", pred, target)?;
    Ok(pred.sub(target)?.square().mean_all())
}

impl LossKind {
    pub fn apply(self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        match self {
            LossKind::L1 => l1_loss(pred, target),
            LossKind::Mse => mse_loss(pred, target),
        }
    }
}

/// Model, optimizer and dropout stream for step-by-step training.
pub struct Trainer {
    pub model: SentinelModel,
    pub optimizer: AdamW,
    ctx: ForwardCtx,
    loss: LossKind,
    grad_clip: Option<f64>,
}

impl Trainer {
    pub fn new(model: SentinelModel, cfg: &TrainConfig, seed: u64) -> Self {
        let dropout = model.config.dropout;
        Self {
            model,
            optimizer: AdamW::new(cfg.optimizer()),
            ctx: ForwardCtx::train(dropout, Rng::new(seed).derive(DROPOUT_STREAM)),
            loss: cfg.loss,
            grad_clip: cfg.grad_clip,
        }
    }

    /// Forward, backward and one optimizer update. Returns the batch loss.
    pub fn step(&mut self, x: &Tensor, y: &Tensor) -> Result<f64> {
        let pred = self.model.forward(x, &mut self.ctx)?;
        let loss = self.loss.apply(&pred, y)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "training loss became {value} at step {}",
                self.optimizer.steps() + 1
            )));
        }
        zero_grad(&self.model);
        loss.backward()?;
        if let Some(max) = self.grad_clip {
            clip_grad_norm(&self.model, max)?;
        }
        let out = self.optimizer.step(&mut self.model);
        zero_grad(&self.model);
        out.map(|_| value)
    }
}

/// One line of the epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub seed: u64,
    pub epoch: usize,
    pub train_l1: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation MSE.
    pub model: SentinelModel,
    pub history: Vec<EpochRecord>,
    /// 1-based.
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub steps: u64,
}

/// Trains a fresh model for one seed. Each finished epoch is appended to
/// `log` as one JSON object per line.
pub fn train(
    model_config: &ModelConfig,
    data: &WindowedData,
    cfg: &TrainConfig,
    seed: u64,
    log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_geometry(model_config, data)?;
    let model = SentinelModel::new(model_config.clone(), seed)?;
    train_model(model, data, cfg, seed, log)
}

fn check_geometry(cfg: &ModelConfig, data: &WindowedData) -> Result<()> {
    if cfg.channels != data.channels || cfg.lookback != data.lookback || cfg.horizon != data.horizon {
        return Err(Error::Config(format!(
            "model expects L={} T={} C={}, data provides L={} T={} C={}",
            cfg.lookback, cfg.horizon, cfg.channels, data.lookback, data.horizon, data.channels
        )));
    }
    Ok(())
}

/// Trains an already-built model.
pub fn train_model(
    model: SentinelModel,
    data: &WindowedData,
    cfg: &TrainConfig,
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_geometry(&model.config, data)?;
    let mut train_windows = data.windows(Split::Train)?;
    let val_windows = data.windows(Split::Val)?;

    let per_epoch = {
        let n = train_windows.len().div_ceil(cfg.batch_size);
        cfg.max_batches_per_epoch.map_or(n, |m| n.min(m))
    };
    let planned = (per_epoch * cfg.epochs) as f64;
    let mut shuffle = Rng::new(seed).derive(SHUFFLE_STREAM);
    let mut trainer = Trainer::new(model, cfg, seed);

    let mut history = Vec::new();
    let mut best: Option<(SentinelModel, usize, f64)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        shuffle.shuffle(&mut train_windows);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in train_windows.chunks(cfg.batch_size).take(per_epoch) {
            if cfg.cosine {
                let t = trainer.optimizer.steps() as f64;
                trainer.optimizer.lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * t / planned).cos());
            }
            let (x, y) = data.batch(batch)?;
            let loss = trainer.step(&x, &y)?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let (val_mse, val_mae) = evaluate_windows(&trainer.model, data, &val_windows, cfg.eval_batch_size)?;
        if !val_mse.is_finite() {
            return Err(Error::Numeric(format!("validation MSE became {val_mse} in epoch {epoch}")));
        }
        let record = EpochRecord {
            seed,
            epoch,
            train_l1: loss_sum / seen as f64,
            val_mse,
            val_mae,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        log::info!(
            "seed {seed} epoch {epoch}: train {:.6} val_mse {:.6} val_mae {:.6}",
            record.train_l1,
            val_mse,
            val_mae
        );
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&record).map_err(|e| Error::Data(e.to_string()))?;
            writeln!(w, "{line}")?;
            w.flush()?;
        }
        history.push(record);

        if best.as_ref().is_none_or(|b| val_mse < b.2) {
            best = Some((trainer.model.clone(), epoch, val_mse));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.patience {
            break;
        }
    }
    let (model, best_epoch, best_val_mse) = best.expect("at least one epoch runs");
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_mse,
        steps: trainer.optimizer.steps(),
    })
}

fn batch_metrics(model: &SentinelModel, data: &WindowedData, batch: &[WindowSample]) -> Result<MetricAccumulator> {
    no_grad(|| {
        let (x, y) = data.batch(batch)?;
        let pred = model.forward(&x, &mut ForwardCtx::eval())?;
        let mut acc = MetricAccumulator::default();
        acc.add(pred.data(), y.data())?;
        Ok(acc)
    })
}

fn merge(parts: Vec<MetricAccumulator>) -> Result<(f64, f64)> {
    let mut total = MetricAccumulator::default();
    for p in &parts {
        total.merge(p);
    }
    total.finish()
}

/// MSE and MAE of `model` over `windows`, batches scored concurrently when
/// the `parallel` feature is on. Partial sums merge in batch order, so the
/// result matches [`evaluate_windows_seq`] exactly.
pub fn evaluate_windows(
    model: &SentinelModel,
    data: &WindowedData,
    windows: &[WindowSample],
    batch_size: usize,
) -> Result<(f64, f64)> {
    #[cfg(feature = "parallel")]
    {
        let parts = windows
            .par_chunks(batch_size.max(1))
            .map(|b| batch_metrics(model, data, b))
            .collect::<Result<Vec<_>>>()?;
        merge(parts)
    }
    #[cfg(not(feature = "parallel"))]
    evaluate_windows_seq(model, data, windows, batch_size)
}

pub fn evaluate_windows_seq(
    model: &SentinelModel,
    data: &WindowedData,
    windows: &[WindowSample],
    batch_size: usize,
) -> Result<(f64, f64)> {
    let parts = windows
        .chunks(batch_size.max(1))
        .map(|b| batch_metrics(model, data, b))
        .collect::<Result<Vec<_>>>()?;
    merge(parts)
}

pub fn evaluate(model: &SentinelModel, data: &WindowedData, split: Split, batch_size: usize) -> Result<(f64, f64)> {
    evaluate_windows(model, data, &data.windows(split)?, batch_size)
}

/// Repeat-last forecast for one window: every horizon step copies the final
/// lookback row.
pub fn persistence_forecast(data: &WindowedData, w: &WindowSample) -> Vec<f64> {
    let c = data.channels;
    let x = data.input(w);
    let last = &x[x.len() - c..];
    last.iter().copied().cycle().take(c * w.horizon).collect()
}

pub fn persistence_metrics(data: &WindowedData, split: Split) -> Result<(f64, f64)> {
    let mut acc = MetricAccumulator::default();
    for w in data.windows(split)? {
        acc.add(&persistence_forecast(data, &w), data.target(&w))?;
    }
    acc.finish()
}
