use std::time::{Duration, Instant};

use ndarray::Axis;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{argmax_rows, Network};
use crate::error::{Result, RhmError};
use crate::grammar::Dataset;
use crate::seed::rng_from_seed;

/// Largest test set used for classification error.
pub const TEST_CAP: u64 = 20_000;

const EVAL_CHUNK: usize = 2048;

/// How the nominal learning rate maps to the step actually taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrScaling {
    /// Step with the nominal rate.
    None,
    /// Multiply the rate by the hidden width `H`; with a `1/H` readout this keeps
    /// hidden-feature updates of order one as `H` grows.
    Width,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    /// Epochs of cosine annealing from `lr_init` to `lr_final`; constant afterwards.
    pub anneal_epochs: usize,
    pub max_epochs: usize,
    pub loss_threshold: f64,
    pub lr_scaling: LrScaling,
    pub seed: u64,
    /// Evaluate the test set every this many epochs (always at the end).
    pub eval_every: Option<usize>,
    #[serde(skip)]
    pub time_budget: Option<Duration>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            lr_init: 0.1,
            lr_final: 0.01,
            anneal_epochs: 100,
            max_epochs: 300,
            loss_threshold: 1e-3,
            lr_scaling: LrScaling::Width,
            seed: 0,
            eval_every: None,
            time_budget: None,
        }
    }
}

impl TrainConfig {
    /// Nominal learning rate at `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.anneal_epochs {
            return self.lr_final;
        }
        let t = epoch as f64 / self.anneal_epochs as f64;
        self.lr_final + 0.5 * (self.lr_init - self.lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.lr_init > 0.0
            && self.lr_final > 0.0
            && self.lr_final <= self.lr_init
            && self.anneal_epochs > 0
            && self.max_epochs > 0
            && self.loss_threshold > 0.0;
        if ok {
            Ok(())
        } else {
            Err(RhmError::Config(format!("invalid training config {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_err: f64,
    pub test_err: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub test_error: f64,
    pub eps_rand: f64,
    pub train_error: Option<f64>,
    pub epochs: usize,
    /// Training loss reached the stopping threshold.
    pub converged: bool,
    pub budget_exceeded: bool,
    pub history: Vec<EpochRecord>,
}

impl EvalReport {
    pub fn loss_history(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.train_loss).collect()
    }

    pub fn error_history(&self) -> Vec<Option<f64>> {
        self.history.iter().map(|r| r.test_err).collect()
    }
}

fn error_rate(net: &Network, data: &Dataset) -> Result<f64> {
    let labels = data.labels();
    let mut wrong = 0usize;
    for (chunk, chunk_labels) in data
        .inputs
        .axis_chunks_iter(Axis(0), EVAL_CHUNK)
        .zip(labels.chunks(EVAL_CHUNK))
    {
        let out = net.forward(&chunk.to_owned())?;
        wrong += argmax_rows(&out)
            .iter()
            .zip(chunk_labels)
            .filter(|(p, l)| p != l)
            .count();
    }
    Ok(wrong as f64 / data.len() as f64)
}

/// Argmax classification error of `net` on `data`.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(RhmError::EmptyTestSet);
    }
    let n_c = net.arch.num_outputs;
    Ok(EvalReport {
        test_error: error_rate(net, data)?,
        eps_rand: 1.0 - 1.0 / n_c as f64,
        train_error: None,
        epochs: 0,
        converged: false,
        budget_exceeded: false,
        history: Vec::new(),
    })
}

/// Mini-batch SGD on the cross-entropy loss, stopping once the epoch's mean
/// training loss falls to the threshold or after `max_epochs`.
pub fn train(net: &mut Network, train_set: &Dataset, test_set: Option<&Dataset>, cfg: &TrainConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(RhmError::Config("empty training set".into()));
    }
    let n_c = net.arch.num_outputs;
    let labels = train_set.labels();
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_c) {
        return Err(RhmError::Config(format!("label {bad} outside [0, {n_c})")));
    }
    let p = train_set.len();
    let batch = cfg.batch_size.min(p);
    let scale = match cfg.lr_scaling {
        LrScaling::None => 1.0,
        LrScaling::Width => net.arch.width as f64,
    };
    let started = Instant::now();
    let mut rng = rng_from_seed(cfg.seed);
    let mut order: Vec<usize> = (0..p).collect();
    let mut history = Vec::new();
    let mut converged = false;
    let mut budget_exceeded = false;
    for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut wrong = 0usize;
        for chunk in order.chunks(batch) {
            let x = train_set.inputs.select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grads, logits) = net.loss_grad_logits(&x, &y)?;
            loss_sum += loss * chunk.len() as f64;
            wrong += argmax_rows(&logits).iter().zip(&y).filter(|(p, l)| p != l).count();
            net.apply_gradients(&grads, lr * scale);
        }
        let train_loss = loss_sum / p as f64;
        if !train_loss.is_finite() {
            return Err(RhmError::Diverged { epoch, lr: lr * scale });
        }
        let done = train_loss <= cfg.loss_threshold;
        let out_of_time = cfg.time_budget.is_some_and(|b| started.elapsed() > b);
        let last = done || out_of_time || epoch + 1 == cfg.max_epochs;
        let due = last || cfg.eval_every.is_some_and(|every| (epoch + 1) % every == 0);
        let test_err = match test_set {
            Some(t) if due && !t.is_empty() => Some(error_rate(net, t)?),
            _ => None,
        };
        history.push(EpochRecord {
            epoch,
            lr: lr * scale,
            train_loss,
            train_err: wrong as f64 / p as f64,
            test_err,
        });
        if done {
            converged = true;
            break;
        }
        if out_of_time {
            budget_exceeded = true;
            break;
        }
    }
    let final_test = history.last().and_then(|r| r.test_err);
    Ok(EvalReport {
        test_error: final_test.unwrap_or(f64::NAN),
        eps_rand: 1.0 - 1.0 / n_c as f64,
        train_error: Some(error_rate(net, train_set)?),
        epochs: history.len(),
        converged,
        budget_exceeded,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints_and_monotone() {
        let cfg = TrainConfig::default();
        assert!((cfg.lr_at(0) - 0.1).abs() < 1e-15);
        assert!((cfg.lr_at(100) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at(250) - 0.01).abs() < 1e-15);
        for e in 0..300 {
            assert!(cfg.lr_at(e + 1) <= cfg.lr_at(e) + 1e-15);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
