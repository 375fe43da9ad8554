//! Mini-batch training of a masked network.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{engine, Batch, ParamVector, Real, Targets, TensorRole};
use crate::error::{Error, Result};
use crate::mask::PruneMask;
use crate::seeds;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    MomentumSgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::MomentumSgd => "momentum-sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "momentum-sgd" | "momentum" | "sgd" => Ok(Self::MomentumSgd),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Decoupled decay applied to unmasked weights only.
    pub weight_decay: f64,
    pub lr_drop_factor: f64,
    /// Sorted milestones; the rate is multiplied by `lr_drop_factor` once each
    /// milestone epoch has completed.
    pub lr_drop_epochs: Vec<usize>,
    /// Momentum coefficient for `momentum-sgd`.
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    /// LeNet-300-100 / MNIST settings at desk scale (5 epochs).
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1.2e-3,
            batch_size: 128,
            epochs: 5,
            weight_decay: 5e-4,
            lr_drop_factor: 0.2,
            lr_drop_epochs: vec![60, 120],
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return Err(Error::Config(format!("lr drop factor must lie in (0, 1], got {}", self.lr_drop_factor)));
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("lr drop epochs must be sorted".into()));
        }
        Ok(())
    }

    /// Learning rate used during zero-based epoch `epoch`. Milestones past the
    /// last epoch are simply never reached.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&m| m <= epoch).count();
        self.learning_rate * self.lr_drop_factor.powi(drops as i32)
    }
}

/// Anything that can hand out mini-batches by row index.
pub trait TrainingData {
    fn len(&self) -> usize;

    fn batch(&self, rows: &[usize]) -> Batch;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    /// Running accuracy over the epoch's batches; absent for regression targets.
    pub accuracy: Option<f64>,
}

enum OptimizerState {
    Adam { m: Vec<f64>, v: Vec<f64>, step: i32 },
    Momentum { velocity: Vec<f64> },
}

pub(crate) fn correct_predictions<T: Real>(logits: &ndarray::Array2<T>, labels: &[u32]) -> usize {
    logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best == y as usize
        })
        .count()
}

/// Trains `params ⊙ mask` and returns the new parameters with per-epoch history.
///
/// Masked positions start at zero and stay exactly zero: gradients are masked
/// and parameters are re-masked after every step. The shuffle order of each
/// epoch is derived from `hyper.seed`, so runs are reproducible.
pub fn train<T: Real, D: TrainingData + ?Sized>(
    params: &ParamVector<T>,
    mask: &PruneMask,
    data: &D,
    hyper: &TrainHyper,
) -> Result<(ParamVector<T>, Vec<EpochStats>)> {
    hyper.validate()?;
    if mask.len() != params.len() {
        return Err(Error::Shape(format!("mask covers {} entries, parameters {}", mask.len(), params.len())));
    }
    if hyper.epochs == 0 {
        return Ok((params.clone(), Vec::new()));
    }
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }

    let keep = mask.bits();
    let decays: Vec<bool> = params
        .layout()
        .roles()
        .into_iter()
        .zip(keep)
        .map(|(role, &k)| k && role == TensorRole::Weight)
        .collect();
    let mut theta: Vec<f64> = params.values().iter().zip(keep).map(|(v, &k)| if k { v.as_f64() } else { 0.0 }).collect();
    let mut current = params.clone();
    let mut state = match hyper.optimizer {
        OptimizerKind::Adam => OptimizerState::Adam { m: vec![0.0; theta.len()], v: vec![0.0; theta.len()], step: 0 },
        OptimizerKind::MomentumSgd => OptimizerState::Momentum { velocity: vec![0.0; theta.len()] },
    };

    let mut history = Vec::with_capacity(hyper.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..hyper.epochs {
        let lr = hyper.learning_rate_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds::derive(hyper.seed, "shuffle", epoch as u64)));

        let (mut loss_sum, mut seen, mut correct, mut classified) = (0.0, 0usize, 0usize, false);
        for rows in order.chunks(hyper.batch_size) {
            for (dst, &src) in current.values_mut().iter_mut().zip(&theta) {
                *dst = T::from_f64(src);
            }
            let batch = data.batch(rows);
            let (out, grad) = match engine::value_and_grad(&current, mask, &batch) {
                Ok(r) => r,
                Err(Error::NumericOverflow { .. }) => return Err(Error::TrainingDiverged { epoch }),
                Err(e) => return Err(e),
            };
            let batch_loss = out.loss.as_f64();
            if !batch_loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            loss_sum += batch_loss * rows.len() as f64;
            seen += rows.len();
            if let Targets::Classes(labels) = &batch.targets {
                classified = true;
                correct += correct_predictions(&out.logits, labels);
            }

            match &mut state {
                OptimizerState::Adam { m, v, step } => {
                    *step += 1;
                    let bc1 = 1.0 - ADAM_BETA1.powi(*step);
                    let bc2 = 1.0 - ADAM_BETA2.powi(*step);
                    for i in 0..theta.len() {
                        if !keep[i] {
                            continue;
                        }
                        let g = grad[i].as_f64();
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                        let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
                        theta[i] -= lr * update;
                    }
                }
                OptimizerState::Momentum { velocity } => {
                    for i in 0..theta.len() {
                        if !keep[i] {
                            continue;
                        }
                        velocity[i] = hyper.momentum * velocity[i] + grad[i].as_f64();
                        theta[i] -= lr * velocity[i];
                    }
                }
            }
            for i in 0..theta.len() {
                if decays[i] {
                    theta[i] -= lr * hyper.weight_decay * theta[i];
                } else if !keep[i] {
                    theta[i] = 0.0;
                }
            }
        }
        let loss = loss_sum / seen as f64;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        history.push(EpochStats {
            epoch,
            learning_rate: lr,
            loss,
            accuracy: classified.then(|| correct as f64 / seen as f64),
        });
        log::debug!("epoch {epoch}: lr {lr:.3e} loss {loss:.5}");
    }
    for (dst, &src) in current.values_mut().iter_mut().zip(&theta) {
        *dst = T::from_f64(src);
    }
    Ok((current, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn milestones_drop_the_rate() {
        let h = TrainHyper::default();
        assert_eq!(h.learning_rate_at(0), 1.2e-3);
        assert_eq!(h.learning_rate_at(59), 1.2e-3);
        // epoch 61 (one-based) is zero-based 60
        assert!((h.learning_rate_at(60) - 0.2 * 1.2e-3).abs() < 1e-18);
        assert!((h.learning_rate_at(120) - 0.04 * 1.2e-3).abs() < 1e-18);
    }

    #[test]
    fn bad_hyperparameters_are_rejected() {
        let bad = [
            TrainHyper { learning_rate: 0.0, ..Default::default() },
            TrainHyper { batch_size: 0, ..Default::default() },
            TrainHyper { lr_drop_factor: 1.5, ..Default::default() },
            TrainHyper { lr_drop_epochs: vec![120, 60], ..Default::default() },
        ];
        for h in bad {
            assert!(h.validate().is_err(), "{h:?}");
        }
    }
}
