//! Training, finetuning and evaluation loops.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::{LossKind, Mode, Tape, Target};
use crate::data::{batches, shuffled_indices, Dataset, Split, Targets, Task};
use crate::error::{Error, Result};
use crate::netgraph::Network;
use crate::numfmt::sig9;
use crate::optim::{Adam, Optimizer, Sgd};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// PSNR reported for a perfect reconstruction.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs (0-based) at which the learning rate is multiplied by `decay`.
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    pub loss: LossKind,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Evaluate on the test split every this many epochs (and after the last).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_decay() -> f64 {
    0.1
}

fn default_eval_every() -> usize {
    1
}

impl TrainConfig {
    /// Desk-scale classification baseline: momentum SGD, 60 epochs,
    /// lr 0.05 decayed by 0.2 at 2/3 and 5/6 of training.
    pub fn classification() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 64,
            lr: 0.05,
            milestones: vec![40, 50],
            decay: 0.2,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            loss: LossKind::CrossEntropy,
            optimizer: OptimizerKind::Sgd,
            eval_every: 5,
        }
    }

    /// Classification finetuning after pruning: 30 epochs from lr 0.01.
    pub fn classification_finetune() -> Self {
        TrainConfig { epochs: 30, lr: 0.01, milestones: vec![20, 25], ..Self::classification() }
    }

    /// Denoising baseline: Adam from 1e-3, divided by 10 at epoch 40 of 50.
    pub fn denoising() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            lr: 1e-3,
            milestones: vec![40],
            decay: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            seed: 0,
            loss: LossKind::Mse,
            optimizer: OptimizerKind::Adam,
            eval_every: 5,
        }
    }

    /// Denoising finetuning: 50 epochs of Adam from 1e-4, divided by 10 at epoch 40.
    pub fn denoising_finetune() -> Self {
        TrainConfig { lr: 1e-4, ..Self::denoising() }
    }

    /// Baseline preset for a task.
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Classification { .. } => Self::classification(),
            Task::Denoising { .. } => Self::denoising(),
        }
    }

    pub fn finetune_for_task(task: Task) -> Self {
        match task {
            Task::Classification { .. } => Self::classification_finetune(),
            Task::Denoising { .. } => Self::denoising_finetune(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2 for train-mode batch norm"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.decay > 0.0 && self.decay.is_finite()) {
            return Err(Error::config("lr must be >= 0 and decay > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::config("momentum must lie in [0, 1) and weight_decay be >= 0"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) || self.milestones.last().is_some_and(|&m| m >= self.epochs) {
            return Err(Error::config("milestones must be strictly increasing and below epochs"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be positive"));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.decay.powi(passed as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Test => "test",
        })
    }
}

/// One line of the metrics log. `metric` is top-1 accuracy in `[0, 1]`
/// for classification and mean PSNR in dB for denoising.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: SplitName,
    pub loss: f64,
    pub metric: f64,
}

#[derive(Debug, Clone)]
pub struct History<T> {
    pub rows: Vec<MetricRow>,
    pub best_epoch: Option<usize>,
    pub best_metric: f64,
    /// Snapshot taken at the best test metric.
    pub best: Option<Network<T>>,
    pub elapsed_secs: f64,
}

impl<T> History<T> {
    pub fn last(&self, split: SplitName) -> Option<&MetricRow> {
        self.rows.iter().rev().find(|r| r.split == split)
    }

    pub fn to_csv(&self) -> String {
        metrics_csv(&self.rows)
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("epoch,split,loss,metric\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.split, sig9(r.loss), sig9(r.metric)));
    }
    out
}

/// `10·log10(1 / mse)` for unit-scale images, capped at [`PSNR_CAP_DB`].
pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

/// Sum of the batch metric: correct predictions or per-image PSNR.
fn metric_sum<T: Scalar>(pred: &Tensor<T>, target: &Target<T>) -> Result<f64> {
    match target {
        Target::Labels(labels) => {
            let [n, k] = pred.dims2()?;
            Ok((0..n)
                .filter(|&i| {
                    let row = &pred.data()[i * k..(i + 1) * k];
                    let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                    best == labels[i]
                })
                .count() as f64)
        }
        Target::Dense(t) => {
            let n = pred.shape()[0];
            let per = pred.len() / n;
            Ok((0..n)
                .map(|i| {
                    let (p, q) = (&pred.data()[i * per..(i + 1) * per], &t.data()[i * per..(i + 1) * per]);
                    psnr(p.iter().zip(q).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum::<f64>() / per as f64)
                })
                .sum())
        }
    }
}

fn check_loss(task: Task, loss: LossKind) -> Result<()> {
    match (task, loss) {
        (Task::Classification { .. }, LossKind::CrossEntropy) | (Task::Denoising { .. }, LossKind::Mse) => Ok(()),
        _ => Err(Error::config(format!("loss {loss:?} does not fit task {task:?}"))),
    }
}

/// Loss for a task: cross-entropy for classification, MSE for denoising.
pub fn loss_for(task: Task) -> LossKind {
    match task {
        Task::Classification { .. } => LossKind::CrossEntropy,
        Task::Denoising { .. } => LossKind::Mse,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub metric: f64,
}

/// Eval-mode loss and metric over a whole split. Batch norm uses running
/// statistics, so the result does not depend on `batch_size`.
pub fn evaluate<T: Scalar>(net: &Network<T>, split: &Split<T>, task: Task, batch_size: usize) -> Result<EvalMetrics> {
    let loss = loss_for(task);
    let n = split.len();
    let order: Vec<usize> = (0..n).collect();
    let (mut loss_sum, mut metric) = (0.0, 0.0);
    for idx in order.chunks(batch_size.max(1)) {
        let (x, y) = split.batch(idx)?;
        let mut tape = Tape::new();
        let trace = net.forward(&x, Mode::Eval, &mut tape)?;
        let (_, v) = tape.loss(trace.output, &y, loss)?;
        loss_sum += v.as_f64() * idx.len() as f64;
        metric += metric_sum(tape.value(trace.output), &y)?;
    }
    if !loss_sum.is_finite() {
        return Err(Error::numeric("evaluation loss is not finite"));
    }
    Ok(EvalMetrics { loss: loss_sum / n as f64, metric: metric / n as f64 })
}

fn make_optimizer<T: Scalar>(cfg: &TrainConfig) -> Box<dyn Optimizer<T>> {
    match cfg.optimizer {
        OptimizerKind::Sgd => Box::new(Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay)),
        OptimizerKind::Adam => Box::new(Adam::new(cfg.lr, cfg.weight_decay)),
    }
}

/// Mini-batch training with a multi-step learning-rate schedule.
/// Deterministic in `cfg.seed`. A non-finite loss aborts with a numeric
/// error naming the epoch and batch.
pub fn train<T: Scalar>(net: &mut Network<T>, data: &Dataset<T>, cfg: &TrainConfig) -> Result<History<T>> {
    cfg.validate()?;
    check_loss(data.task, cfg.loss)?;
    if data.sample_shape() != net.spec().input {
        return Err(Error::config(format!(
            "data samples are {:?} but the network expects {:?}",
            data.sample_shape(),
            net.spec().input
        )));
    }
    let start = Instant::now();
    let mut opt = make_optimizer::<T>(cfg);
    let mut history = History { rows: Vec::new(), best_epoch: None, best_metric: f64::NEG_INFINITY, best: None, elapsed_secs: 0.0 };
    let n = data.train.len();
    for epoch in 0..cfg.epochs {
        opt.set_lr(cfg.lr_at(epoch));
        let order = shuffled_indices(n, cfg.seed, epoch as u64);
        let (mut loss_sum, mut metric) = (0.0, 0.0);
        for (b, idx) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let (x, y) = data.train.batch(idx)?;
            let mut tape = Tape::new();
            let diverged = |e: Error| match e {
                Error::Numeric(msg) => Error::numeric(format!("training diverged at epoch {epoch}, batch {b}: {msg}")),
                other => other,
            };
            let trace = net.forward(&x, Mode::Train, &mut tape).map_err(diverged)?;
            let (l, v) = tape.loss(trace.output, &y, cfg.loss).map_err(diverged)?;
            if !v.is_finite() {
                return Err(Error::numeric(format!("training diverged: loss is {v} at epoch {epoch}, batch {b}")));
            }
            metric += metric_sum(tape.value(trace.output), &y)?;
            tape.backward(l)?;
            net.update_running_stats(&trace.moments)?;
            net.accumulate_grads(&tape, &trace)?;
            opt.step(&mut net.params_mut())?;
            loss_sum += v.as_f64() * idx.len() as f64;
        }
        history.rows.push(MetricRow { epoch, split: SplitName::Train, loss: loss_sum / n as f64, metric: metric / n as f64 });
        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            let m = evaluate(net, &data.test, data.task, cfg.batch_size.max(64))?;
            log::info!("epoch {epoch}: train loss {:.4}, test loss {:.4}, test metric {:.4}", loss_sum / n as f64, m.loss, m.metric);
            history.rows.push(MetricRow { epoch, split: SplitName::Test, loss: m.loss, metric: m.metric });
            if m.metric > history.best_metric {
                history.best_metric = m.metric;
                history.best_epoch = Some(epoch);
                history.best = Some(net.clone());
            }
        }
    }
    history.elapsed_secs = start.elapsed().as_secs_f64();
    Ok(history)
}

/// Finetunes a (pruned) network; the same loop as [`train`] under a
/// finetuning schedule.
pub fn finetune<T: Scalar>(net: &mut Network<T>, data: &Dataset<T>, cfg: &TrainConfig) -> Result<History<T>> {
    train(net, data, cfg)
}

/// Metric of a network that outputs zeros: chance-free reference PSNR of
/// the noisy input for denoising, `None` for classification.
pub fn identity_psnr<T: Scalar>(split: &Split<T>) -> Option<f64> {
    match &split.targets {
        Targets::Dense(r) => {
            let per = r.len() / split.len();
            Some(
                r.data()
                    .chunks(per)
                    .map(|c| psnr(c.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / per as f64))
                    .sum::<f64>()
                    / split.len() as f64,
            )
        }
        Targets::Labels(_) => None,
    }
}
