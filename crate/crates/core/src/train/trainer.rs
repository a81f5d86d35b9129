use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::metrics::{frame_metrics, mse_objective, per_frame_metrics, pixel_factor, FrameMetrics};
use super::optim::{Optimizer, OptimizerConfig};
use super::schedule::{lr_at, ScheduleConfig};
use crate::autodiff::{Precision, Tape};
use crate::error::{Error, Result};
use crate::prednet::{rollout_on_tape, save_checkpoint, NetworkParams, RolloutPlan, TensorDtype};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,phase,loss,mse,mae,ssim,psnr,lr";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub plan: RolloutPlan,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub precision: Precision,
    pub seed: u64,
    pub eval_batch: usize,
    /// Also score the next-frame predictions made while inputs are observed.
    pub input_loss: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config("epochs, batch_size and eval_batch must be positive".into()));
        }
        if self.schedule.total_epochs != self.epochs as f64 {
            return Err(Error::Config(format!(
                "schedule spans {} epochs but training runs {}",
                self.schedule.total_epochs, self.epochs
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        self.plan.validate()?;
        self.schedule.validate()?;
        self.optimizer.validate()
    }
}

/// Splits `[B, T, ...]` sequences into model inputs and future targets.
pub fn split_sequences(frames: &Tensor, plan: &RolloutPlan) -> Result<(Tensor, Tensor)> {
    let (_, t, ..) = frames.dims5("split_sequences")?;
    if t < plan.t_in + plan.t_out {
        return Err(Error::shape(
            "split_sequences",
            format!("sequences have {t} frames, plan needs {}", plan.t_in + plan.t_out),
        ));
    }
    let take = |r: std::ops::Range<usize>| -> Result<Tensor> {
        Tensor::stack_frames(&r.map(|k| frames.frame(k)).collect::<Result<Vec<_>>>()?)
    };
    Ok((take(0..plan.t_in)?, take(plan.t_in..plan.t_in + plan.t_out)?))
}

/// Element-mean MSE over the `t_out` predictions and its gradient for every
/// named parameter. With `input_loss` the `t_in - 1` input-phase
/// predictions are averaged in as well.
pub fn loss_and_grads(
    net: &NetworkParams,
    batch: &Tensor,
    plan: &RolloutPlan,
    precision: Precision,
    input_loss: bool,
) -> Result<(f64, IndexMap<String, Tensor>)> {
    let (inputs, _) = split_sequences(batch, plan)?;
    let mut tape = Tape::with_precision(precision);
    let bound = net.bind(&mut tape, true)?;
    let r = rollout_on_tape(&mut tape, net.config(), &bound, plan, &inputs)?;
    let first = if input_loss { 0 } else { plan.t_in - 1 };
    let mut total = None;
    for (k, &pred) in r.steps.iter().enumerate().skip(first) {
        let target = tape.constant(batch.frame(k + 1)?)?;
        let l = tape.mse(pred, target)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let scored = r.steps.len() - first;
    let loss = tape.scale(total.expect("t_out >= 1"), 1.0 / scored as f64)?;
    let grads = tape.backward(loss)?;
    let map = bound
        .vars
        .iter()
        .map(|(name, &v)| (name.clone(), grads.wrt(&tape, v)))
        .collect();
    Ok((tape.value(loss).item(), map))
}

/// Predictions for `frames` in chunks of `chunk` sequences.
pub fn predict(net: &NetworkParams, frames: &Tensor, plan: &RolloutPlan, chunk: usize) -> Result<Tensor> {
    let (n, ..) = frames.dims5("predict")?;
    let mut parts: Vec<Tensor> = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        parts.push(net.rollout(plan, &frames.slice_batch(start, end)?)?);
        start = end;
    }
    concat_batch(&parts)
}

fn concat_batch(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat", "nothing to concatenate"))?;
    let mut shape = first.shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

/// Test-set evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub metrics: FrameMetrics,
    pub per_frame: Vec<FrameMetrics>,
    pub predictions: Tensor,
}

pub fn evaluate(net: &NetworkParams, frames: &Tensor, plan: &RolloutPlan, chunk: usize) -> Result<EvalReport> {
    let (_, targets) = split_sequences(frames, plan)?;
    let predictions = predict(net, frames, plan, chunk)?;
    Ok(EvalReport {
        loss: mse_objective(&predictions, &targets)?,
        metrics: frame_metrics(&predictions, &targets)?,
        per_frame: per_frame_metrics(&predictions, &targets)?,
        predictions,
    })
}

/// One epoch of training followed by evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Train loss rescaled to the reported-MSE convention.
    pub train_mse: f64,
    pub test_loss: f64,
    pub test: FrameMetrics,
    pub lr: f64,
}

impl EpochRecord {
    /// The `train` and `test` metric rows.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{},train,{},{},,,,{}", self.epoch, self.train_loss, self.train_mse, self.lr).unwrap();
        writeln!(
            s,
            "{},test,{},{},{},{},{},{}",
            self.epoch, self.test_loss, self.test.mse, self.test.mae, self.test.ssim, self.test.psnr, self.lr
        )
        .unwrap();
        s
    }
}

pub trait TrainObserver {
    fn on_epoch(&mut self, record: &EpochRecord, net: &NetworkParams) -> Result<()>;
}

impl TrainObserver for () {
    fn on_epoch(&mut self, _: &EpochRecord, _: &NetworkParams) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for Vec<EpochRecord> {
    fn on_epoch(&mut self, record: &EpochRecord, _: &NetworkParams) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Keeps a copy of the parameters with the lowest test MSE.
#[derive(Clone, Debug, Default)]
pub struct KeepBest {
    pub best: Option<(f64, NetworkParams)>,
}

impl TrainObserver for KeepBest {
    fn on_epoch(&mut self, record: &EpochRecord, net: &NetworkParams) -> Result<()> {
        if self.best.as_ref().is_none_or(|(m, _)| record.test.mse < *m) {
            self.best = Some((record.test.mse, net.clone()));
        }
        Ok(())
    }
}

/// Writes `metrics.csv` and keeps `best.ckpt` at the lowest test MSE.
pub struct RunArtifacts {
    dir: PathBuf,
    meta: String,
    best: f64,
}

impl RunArtifacts {
    pub const METRICS: &'static str = "metrics.csv";
    pub const BEST: &'static str = "best.ckpt";

    pub fn create(dir: &Path, meta: String) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(Self::METRICS), format!("{METRICS_HEADER}\n"))?;
        Ok(RunArtifacts {
            dir: dir.to_path_buf(),
            meta,
            best: f64::INFINITY,
        })
    }

    pub fn best_mse(&self) -> f64 {
        self.best
    }
}

impl TrainObserver for RunArtifacts {
    fn on_epoch(&mut self, record: &EpochRecord, net: &NetworkParams) -> Result<()> {
        let mut f = std::fs::OpenOptions::new().append(true).open(self.dir.join(Self::METRICS))?;
        f.write_all(record.csv_rows().as_bytes())?;
        if record.test.mse < self.best {
            self.best = record.test.mse;
            save_checkpoint(&self.dir.join(Self::BEST), &self.meta, net.tensors(), TensorDtype::F64)?;
        }
        Ok(())
    }
}

/// Result of [`Trainer::fit`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_test_mse: f64,
}

/// Seeded epoch-driven BPTT.
pub struct Trainer {
    net: NetworkParams,
    opt: Optimizer,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(net: NetworkParams, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Trainer {
            opt: Optimizer::new(cfg.optimizer.clone())?,
            net,
            cfg,
            rng,
        })
    }

    pub fn net(&self) -> &NetworkParams {
        &self.net
    }

    pub fn into_net(self) -> NetworkParams {
        self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// One optimizer step on `batch` (`[B, T, C, H, W]`). Returns the loss
    /// before the update.
    pub fn step(&mut self, batch: &Tensor, lr: f64) -> Result<f64> {
        let (loss, mut grads) = loss_and_grads(&self.net, batch, &self.cfg.plan, self.cfg.precision, self.cfg.input_loss)?;
        if let Some(clip) = self.cfg.grad_clip {
            let norm = grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
            if norm > clip {
                let s = clip / norm;
                for g in grads.values_mut() {
                    for v in g.data_mut() {
                        *v *= s;
                    }
                }
            }
        }
        self.opt.step(self.net.tensors_mut(), &grads, lr)?;
        if self.cfg.precision == Precision::F32 {
            for t in self.net.tensors_mut().values_mut() {
                t.round_to_f32();
            }
        }
        Ok(loss)
    }

    fn diverged(epoch: usize, step: usize, e: Error) -> Error {
        match e {
            Error::NonFinite { .. } | Error::NonFiniteGradient(_) => Error::Divergence {
                epoch,
                step,
                detail: e.to_string(),
            },
            other => other,
        }
    }

    /// Full training run over `train`, evaluating on `test` after every epoch.
    pub fn fit(&mut self, train: &Tensor, test: &Tensor, observer: &mut dyn TrainObserver) -> Result<TrainSummary> {
        let (n, ..) = train.dims5("train")?;
        split_sequences(train, &self.cfg.plan)?;
        split_sequences(test, &self.cfg.plan)?;
        let bs = self.cfg.batch_size.min(n);
        let batches = n / bs;
        let mut records = Vec::with_capacity(self.cfg.epochs);
        let (mut best_epoch, mut best) = (0, f64::INFINITY);
        let factor = pixel_factor(train.shape())?;
        for epoch in 0..self.cfg.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut self.rng);
            let mut total = 0.0;
            let mut lr = 0.0;
            for b in 0..batches {
                let progress = epoch as f64 + (b + 1) as f64 / batches as f64;
                lr = lr_at(&self.cfg.schedule, progress)?;
                let batch = train.gather_batch(&order[b * bs..(b + 1) * bs])?;
                let loss = self
                    .step(&batch, lr)
                    .map_err(|e| Self::diverged(epoch + 1, self.opt.steps() as usize + 1, e))?;
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch: epoch + 1,
                        step: self.opt.steps() as usize,
                        detail: format!("loss is {loss}"),
                    });
                }
                total += loss;
            }
            let train_loss = total / batches as f64;
            let report = evaluate(&self.net, test, &self.cfg.plan, self.cfg.eval_batch)?;
            let record = EpochRecord {
                epoch: epoch + 1,
                train_loss,
                train_mse: train_loss * factor,
                test_loss: report.loss,
                test: report.metrics,
                lr,
            };
            observer.on_epoch(&record, &self.net)?;
            if record.test.mse < best {
                best = record.test.mse;
                best_epoch = record.epoch;
            }
            records.push(record);
        }
        Ok(TrainSummary {
            records,
            best_epoch,
            best_test_mse: best,
        })
    }
}
