//! Minibatch SGD on `L = L_s + μ·L_c` over weights and mask logits.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::constraint::{
    barrier_loss, barrier_loss_of, check_alpha, check_mu, constraints_for, total_loss,
    ConstraintSpec,
};
use crate::dilation::BinaryMask;
use crate::error::{Error, Result};
use crate::model::{Model, TaskLoss};
use crate::rng;
use crate::synth::DataSet;
use crate::tensor::Tensor;

fn default_threshold() -> f64 {
    0.5
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    /// Barrier weight μ.
    pub mu: f64,
    /// Barrier slope α.
    #[serde(default)]
    pub alpha: f64,
    /// Divide each violation by its maximum possible value.
    #[serde(default = "default_true")]
    pub normalize: bool,
    pub seed: u64,
    /// Global gradient-norm clip.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    /// Epochs between mask snapshots; none when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_period: Option<usize>,
    /// Binarization threshold for reported masks and hard-mask inference.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub loss: TaskLoss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            mu: 1.0,
            alpha: 0.0,
            normalize: true,
            seed: 0,
            grad_clip: None,
            snapshot_period: None,
            threshold: 0.5,
            loss: TaskLoss::CrossEntropy,
        }
    }
}

impl TrainConfig {
    /// Returns the first violated field as `(field, message)`.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.epochs == 0 {
            return Err(("epochs", "must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(("batch_size", "must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(("learning_rate", "must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(("momentum", "must lie in [0, 1)".into()));
        }
        check_mu(self.mu).map_err(|e| ("mu", e.to_string()))?;
        check_alpha(self.alpha).map_err(|e| ("alpha", e.to_string()))?;
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(("grad_clip", "must be > 0".into()));
            }
        }
        if self.snapshot_period == Some(0) {
            return Err(("snapshot_period", "must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(("threshold", "must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|(field, msg)| Error::config(format!("train.{field}"), msg))
    }
}

/// Plain SGD with optional classical momentum and global norm clipping.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub grad_clip: Option<f64>,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, grad_clip: Option<f64>) -> Self {
        Sgd {
            learning_rate,
            momentum,
            grad_clip,
            velocity: Vec::new(),
        }
    }

    /// `v ← momentum·v + g; θ ← θ − lr·v`, then zeroes `grads`.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &mut [Tensor],
        names: &[String],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid("parameter and gradient counts differ"));
        }
        for (i, g) in grads.iter().enumerate() {
            if !g.all_finite() {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("param{i}"));
                return Err(Error::NonFinite {
                    index: i,
                    context: format!("gradient of {name}"),
                });
            }
        }
        if let Some(clip) = self.grad_clip {
            let norm = grads
                .iter()
                .flat_map(|g| g.data().iter())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let s = clip / norm;
                for g in grads.iter_mut() {
                    g.data_mut().iter_mut().for_each(|x| *x *= s);
                }
            }
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        for ((p, g), v) in params
            .iter_mut()
            .zip(grads.iter_mut())
            .zip(&mut self.velocity)
        {
            for ((theta, gi), vi) in p.data_mut().iter_mut().zip(g.data_mut()).zip(v.data_mut()) {
                *vi = self.momentum * *vi + *gi;
                *theta -= self.learning_rate * *vi;
                *gi = 0.0;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss_task: f64,
    pub loss_barrier: f64,
    pub loss_total: f64,
}

/// One forward/backward/update on a batch.
pub fn train_step(
    model: &mut Model,
    opt: &mut Sgd,
    constraints: &[ConstraintSpec],
    inputs: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<StepStats> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, None)?;
    let x = tape.constant(inputs.clone());
    let logits = model.forward(&mut tape, &bound, x)?;
    let task = model.task_loss(&mut tape, logits, labels, cfg.loss)?;
    let (loss, lc) = if constraints.is_empty() {
        (task, 0.0)
    } else {
        let lc = barrier_loss(&mut tape, constraints, &bound.masks)?;
        (
            total_loss(&mut tape, task, lc, cfg.mu)?,
            tape.value(lc).item(),
        )
    };
    let stats = StepStats {
        loss_task: tape.value(task).item(),
        loss_barrier: lc,
        loss_total: tape.value(loss).item(),
    };
    if !stats.loss_total.is_finite() {
        return Err(Error::NonFinite {
            index: 0,
            context: "training loss".into(),
        });
    }
    tape.backward(loss)?;
    let mut grads: Vec<Tensor> = bound
        .params
        .iter()
        .map(|v| {
            tape.grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(*v).shape()))
        })
        .collect();
    let names = model.param_names();
    opt.step(&mut model.params_mut(), &mut grads, &names)?;
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_task: f64,
    pub loss_barrier: f64,
    pub constraint_values: Vec<f64>,
    pub max_constraint_value: Option<f64>,
    pub saturation_fraction: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSnapshot {
    pub epoch: usize,
    pub layer: usize,
    pub channel: usize,
    pub dump: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mu: f64,
    pub records: Vec<EpochRecord>,
    pub constraints: Vec<ConstraintSpec>,
    pub notices: Vec<String>,
    /// Binarized masks per layer and channel at the end of training.
    pub final_masks: Vec<Vec<BinaryMask>>,
    #[serde(skip)]
    pub snapshots: Vec<MaskSnapshot>,
}

pub const METRICS_HEADER: &str =
    "epoch,loss_total,loss_task,loss_barrier,max_constraint_value,saturation_fraction,val_accuracy";

impl TrainReport {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn all_feasible(&self) -> bool {
        self.final_masks.iter().flatten().all(|m| m.feasible)
    }

    /// One header line, then one row per epoch. An empty
    /// `max_constraint_value` means the model has no constraints.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.records {
            let maxc = r
                .max_constraint_value
                .map(|v| v.to_string())
                .unwrap_or_default();
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.epoch,
                r.loss_total,
                r.loss_task,
                r.loss_barrier,
                maxc,
                r.saturation_fraction,
                r.val_accuracy
            )
            .unwrap();
        }
        s
    }
}

fn evaluate(
    model: &Model,
    constraints: &[ConstraintSpec],
    train: &DataSet,
    val: &DataSet,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochRecord> {
    let loss_task = model.dataset_loss(train, cfg.loss)?;
    let (loss_barrier, values) = if constraints.is_empty() {
        (0.0, Vec::new())
    } else {
        barrier_loss_of(constraints, &model.masks())?
    };
    let (sat, total) = model.saturation();
    Ok(EpochRecord {
        epoch,
        loss_total: loss_task + cfg.mu * loss_barrier,
        loss_task,
        loss_barrier,
        max_constraint_value: values.iter().cloned().reduce(f64::max),
        constraint_values: values,
        saturation_fraction: if total == 0 {
            0.0
        } else {
            sat as f64 / total as f64
        },
        train_accuracy: model.accuracy(train, None)?,
        val_accuracy: model.accuracy(val, Some(cfg.threshold))?,
    })
}

fn final_masks(model: &Model, threshold: f64) -> Result<Vec<Vec<BinaryMask>>> {
    model
        .layers
        .iter()
        .map(|l| l.masks.iter().map(|m| m.binarize(threshold)).collect())
        .collect()
}

/// Runs the epoch loop. Validation accuracy uses binarized masks on `val`
/// (or on `train` when no validation set is given).
///
/// A non-finite loss or gradient stops training with
/// [`Error::Diverged`], which carries the report up to the last completed
/// epoch.
pub fn train(
    model: &mut Model,
    data: &DataSet,
    val: Option<&DataSet>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let val = val.unwrap_or(data);
    let (constraints, notices) = constraints_for(&model.masks(), cfg.alpha, cfg.normalize)?;
    let mut report = TrainReport {
        mu: cfg.mu,
        records: Vec::with_capacity(cfg.epochs),
        constraints: constraints.clone(),
        notices,
        final_masks: Vec::new(),
        snapshots: Vec::new(),
    };
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.grad_clip);
    let mut order_rng = rng::derive(cfg.seed, 0x5EED);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        for batch in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(batch);
            match train_step(model, &mut opt, &constraints, &x, &y, cfg) {
                Ok(_) => {}
                Err(Error::NonFinite { .. }) => {
                    report.final_masks = final_masks(model, cfg.threshold).unwrap_or_default();
                    return Err(Error::Diverged {
                        epoch,
                        last_good: Box::new(report),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        let record = evaluate(model, &constraints, data, val, cfg, epoch)?;
        if !record.loss_total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                last_good: Box::new(report),
            });
        }
        report.records.push(record);
        if let Some(period) = cfg.snapshot_period {
            if epoch % period == 0 || epoch == cfg.epochs {
                for (li, l) in model.layers.iter().enumerate() {
                    for (ci, m) in l.masks.iter().enumerate() {
                        report.snapshots.push(MaskSnapshot {
                            epoch,
                            layer: li,
                            channel: ci,
                            dump: m.dump(ci, cfg.threshold)?,
                        });
                    }
                }
            }
        }
    }
    report.final_masks = final_masks(model, cfg.threshold)?;
    Ok(report)
}
