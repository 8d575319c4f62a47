//! SGD with momentum and a step learning-rate schedule.

use serde::{Deserialize, Serialize};
use sftn_tensor::{Graph, Real, Var};

use crate::data::{batches, Dataset};
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    /// Desk-scale defaults: 30 epochs with decays at 19/23/27.
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 30,
            milestones: vec![19, 23, 27],
            decay_factor: 0.1,
            batch_size: 64,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self, path: &str) -> Result<()> {
        let err = |field: &str, msg: String| Err(CoreError::config(format!("{path}.{field}"), msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err("lr", format!("must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err(
                "momentum",
                format!("must lie in [0, 1), got {}", self.momentum),
            );
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return err(
                "weight_decay",
                format!("must be nonnegative, got {}", self.weight_decay),
            );
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return err(
                "decay_factor",
                format!("must be positive, got {}", self.decay_factor),
            );
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be at least 1".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return err(
                "milestones",
                format!("must be strictly increasing, got {:?}", self.milestones),
            );
        }
        if let Some(&last) = self.milestones.last() {
            if last >= self.epochs {
                return err(
                    "milestones",
                    format!("milestone {last} is not below epochs = {}", self.epochs),
                );
            }
        }
        Ok(())
    }

    /// Same schedule stretched or squeezed onto `epochs` epochs.
    pub fn rescaled(&self, epochs: usize) -> Self {
        let mut milestones: Vec<usize> = if self.epochs == 0 {
            Vec::new()
        } else {
            self.milestones
                .iter()
                .map(|&m| m * epochs / self.epochs)
                .filter(|&m| m > 0 && m < epochs)
                .collect()
        };
        milestones.dedup();
        Self {
            epochs,
            milestones,
            ..self.clone()
        }
    }
}

/// `lr · decay_factor^(number of milestones ≤ epoch)`.
pub fn lr_at(epoch: usize, cfg: &SgdConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(CoreError::InvalidArgument(format!(
            "epoch {epoch} outside schedule of {} epochs",
            cfg.epochs
        )));
    }
    let passed = cfg.milestones.iter().filter(|&&m| m <= epoch).count();
    Ok(cfg.lr * cfg.decay_factor.powi(passed as i32))
}

/// One momentum step on a flat parameter buffer:
/// `v ← momentum·v + (g + weight_decay·θ)`, `θ ← θ − lr·v`.
pub fn sgd_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(CoreError::InvalidArgument(format!(
            "sgd_step: params {}, grads {}, velocity {} differ in length",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    let (lr, m, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = m * *v + (g + wd * *p);
        *p = *p - lr * *v;
    }
    Ok(())
}

/// Optimizer state for every trainable persistent tensor of a graph.
#[derive(Debug)]
pub struct Sgd<T> {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(cfg: &SgdConfig) -> Self {
        Self {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Updates every persistent tensor that requires a gradient and received
    /// one. Weight decay applies only to tensors registered with decay
    /// (conv/linear weights).
    pub fn step(&mut self, g: &mut Graph<T>, lr: f64) -> Result<()> {
        if self.velocity.len() < g.persistent_len() {
            self.velocity.resize_with(g.persistent_len(), || None);
        }
        let vars: Vec<Var> = g.persistent_vars().collect();
        for v in vars {
            if !g.requires_grad(v) {
                continue;
            }
            let Some(grad) = g.grad(v).map(<[T]>::to_vec) else {
                continue;
            };
            let wd = if g.decays(v) { self.weight_decay } else { 0.0 };
            let velocity =
                self.velocity[v.index()].get_or_insert_with(|| vec![T::zero(); grad.len()]);
            let param = g.value_mut(v)?.data_mut();
            sgd_step(param, &grad, velocity, lr, self.momentum, wd)?;
        }
        Ok(())
    }
}

/// Scalar loss of one step plus named components for logging.
pub struct StepOutput {
    pub loss: Var,
    pub components: Vec<(&'static str, f64)>,
    pub correct: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
    /// Sample-weighted means of the step components.
    pub components: Vec<(String, f64)>,
    pub test_acc: Option<f64>,
}

/// Runs `cfg.epochs` epochs of minibatch SGD over `data`.
///
/// `step` builds the loss for one batch on a freshly reset graph; the loop
/// back-propagates and applies the update. A non-finite loss aborts with the
/// epoch and batch index. `after_epoch` may evaluate and returns the test
/// accuracy to log.
pub fn run_epochs<T, S, E>(
    g: &mut Graph<T>,
    data: &Dataset,
    cfg: &SgdConfig,
    seed: u64,
    mut step: S,
    mut after_epoch: E,
) -> Result<Vec<EpochLog>>
where
    T: Real,
    S: FnMut(&mut Graph<T>, &[usize]) -> Result<StepOutput>,
    E: FnMut(&mut Graph<T>, usize) -> Result<Option<f64>>,
{
    if data.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    let mut sgd = Sgd::new(cfg);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg)?;
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut comp_sums: Vec<(&'static str, f64)> = Vec::new();
        for (bi, batch) in batches(data.len(), cfg.batch_size, seed, epoch)
            .iter()
            .enumerate()
        {
            g.reset();
            let out = step(g, batch)?;
            let loss = g.value(out.loss).item().map_or(f64::NAN, |v| v.as_f64());
            if !loss.is_finite() {
                return Err(CoreError::Divergence {
                    epoch,
                    batch: bi,
                    loss,
                });
            }
            g.backward(out.loss)?;
            sgd.step(g, lr)?;
            let w = batch.len() as f64;
            loss_sum += loss * w;
            correct += out.correct;
            for (name, value) in out.components {
                match comp_sums.iter_mut().find(|(n, _)| *n == name) {
                    Some((_, acc)) => *acc += value * w,
                    None => comp_sums.push((name, value * w)),
                }
            }
        }
        g.reset();
        let test_acc = after_epoch(g, epoch)?;
        let n = data.len() as f64;
        logs.push(EpochLog {
            epoch,
            lr,
            loss: loss_sum / n,
            train_acc: correct as f64 / n,
            components: comp_sums
                .into_iter()
                .map(|(k, v)| (k.to_string(), v / n))
                .collect(),
            test_acc,
        });
    }
    Ok(logs)
}

/// Number of rows of `[n, k]` logits whose argmax equals the label.
pub fn count_correct<T: Real>(logits: &[T], k: usize, labels: &[usize]) -> usize {
    logits
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Index of the first maximum.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
