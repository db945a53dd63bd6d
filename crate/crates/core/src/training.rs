//! Adam training loop with a relative-improvement plateau stop, shared by
//! policy and dynamics fitting.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::StepBatch;
use crate::diffnet::{adam_step, AdamConfig, AdamState, Parameters};
use crate::error::{usage_err, MilError, Result};
use crate::policy::PolicyConfig;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InnerTrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_min_rel_improve: f64,
    /// Rows per Adam update; 0 means one full-batch update per epoch.
    pub batch_size: usize,
    pub seed_base: u64,
    /// Factor applied to the learning rate each time the loss plateaus;
    /// 1 stops training at the first plateau instead.
    pub lr_decay: f64,
    /// Decay stops once the learning rate would fall below this.
    pub min_learning_rate: f64,
    pub policy: PolicyConfig,
}

impl Default for InnerTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            max_epochs: 2000,
            plateau_patience: 20,
            plateau_min_rel_improve: 1e-4,
            batch_size: 256,
            seed_base: 0,
            lr_decay: 1.0,
            min_learning_rate: 0.0,
            policy: PolicyConfig::default(),
        }
    }
}

impl InnerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(usage_err!("learning_rate must be finite and nonnegative"));
        }
        if self.max_epochs == 0 {
            return Err(usage_err!("max_epochs must be at least 1"));
        }
        if self.plateau_patience == 0 {
            return Err(usage_err!("plateau_patience must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.plateau_min_rel_improve) {
            return Err(usage_err!("plateau_min_rel_improve must lie in [0, 1)"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(usage_err!("lr_decay must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.learning_rate)
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome<P> {
    /// Parameters from the epoch with the lowest training loss.
    pub params: P,
    pub best_loss: f64,
    pub epochs: usize,
}

/// Tracks the plateau rule: stop after `patience` consecutive epochs whose
/// loss fails to beat the best so far by a relative margin.
#[derive(Debug, Clone)]
pub struct Plateau {
    patience: usize,
    min_rel: f64,
    best: f64,
    stale: usize,
}

impl Plateau {
    pub fn new(patience: usize, min_rel: f64) -> Self {
        Self {
            patience,
            min_rel,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records an epoch loss. Returns `(is_new_best, should_stop)`.
    pub fn observe(&mut self, loss: f64) -> (bool, bool) {
        let is_best = loss < self.best;
        let improved = if self.best.is_finite() {
            loss < self.best - self.min_rel * self.best.abs()
        } else {
            loss.is_finite()
        };
        if is_best {
            self.best = loss;
        }
        if improved {
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        (is_best, self.stale >= self.patience)
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn reset_patience(&mut self) {
        self.stale = 0;
    }
}

/// Minimizes `loss_and_grad` over `batch` with Adam.
///
/// Full-batch mode evaluates the loss before each update, so the returned
/// parameters are exactly those that scored `best_loss`. Minibatch mode
/// reshuffles rows every epoch from `shuffle_seed` and scores an epoch by the
/// row-weighted mean of its minibatch losses.
pub fn fit<P, F>(
    mut params: P,
    batch: &StepBatch,
    config: &InnerTrainConfig,
    shuffle_seed: u64,
    mut loss_and_grad: F,
) -> Result<FitOutcome<P>>
where
    P: Parameters + Clone,
    F: FnMut(&P, &StepBatch) -> Result<(f64, P)>,
{
    config.validate()?;
    if batch.is_empty() {
        return Err(usage_err!("cannot train on an empty batch"));
    }
    let mut adam = AdamState::new(&params, config.adam());
    let mut plateau = Plateau::new(config.plateau_patience, config.plateau_min_rel_improve);
    let mut best_params = params.clone();
    let n = batch.len();
    let full = config.batch_size == 0 || config.batch_size >= n;
    let mut order: Vec<usize> = (0..n).collect();
    let mut epochs = 0;
    for epoch in 0..config.max_epochs {
        epochs = epoch + 1;
        if full {
            let (loss, grads) = loss_and_grad(&params, batch)?;
            check_loss(loss)?;
            let (is_best, stop) = plateau.observe(loss);
            if is_best {
                best_params = params.clone();
            }
            if stop && !decay(&mut adam, &mut plateau, config) {
                break;
            }
            adam_step(&mut params, &grads, &mut adam)?;
            continue;
        }
        order.shuffle(&mut seed::rng(seed::derive(shuffle_seed, epoch as u64)));
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mb = batch.select(chunk);
            let (loss, grads) = loss_and_grad(&params, &mb)?;
            check_loss(loss)?;
            total += loss * chunk.len() as f64;
            adam_step(&mut params, &grads, &mut adam)?;
        }
        let epoch_loss = total / n as f64;
        let (is_best, stop) = plateau.observe(epoch_loss);
        if is_best {
            best_params = params.clone();
        }
        if stop && !decay(&mut adam, &mut plateau, config) {
            break;
        }
    }
    Ok(FitOutcome {
        params: best_params,
        best_loss: plateau.best(),
        epochs,
    })
}

/// Lowers the learning rate after a plateau; false when no decay is left.
fn decay(adam: &mut AdamState, plateau: &mut Plateau, config: &InnerTrainConfig) -> bool {
    let next = adam.config.learning_rate * config.lr_decay;
    if config.lr_decay >= 1.0 || next < config.min_learning_rate {
        return false;
    }
    adam.config.learning_rate = next;
    plateau.reset_patience();
    true
}

fn check_loss(loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(MilError::Numeric("training loss".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_counts_stale_epochs() {
        let mut p = Plateau::new(3, 0.1);
        assert_eq!(p.observe(1.0), (true, false));
        assert_eq!(p.observe(0.95), (true, false));
        assert_eq!(p.observe(0.99), (false, false));
        assert_eq!(p.observe(0.5), (true, false));
        assert_eq!(p.observe(0.5), (false, false));
        assert_eq!(p.observe(0.49), (true, false));
        assert_eq!(p.observe(0.49), (false, true));
    }

    #[test]
    fn config_validation() {
        assert!(InnerTrainConfig::default().validate().is_ok());
        let bad = InnerTrainConfig {
            plateau_patience: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = InnerTrainConfig {
            plateau_min_rel_improve: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
