//! Per-step squared-error imitation losses.

use serde::{Deserialize, Serialize};

use crate::datasets::DemoDataset;
use crate::diffnet::row_sq_sum;
use crate::error::{shape_err, usage_err, MilError, Result};
use crate::policy::{ActionPolicy, MaskVector, MaskedPolicy, PolicyParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub value: f64,
    pub num_steps: usize,
}

/// Mean over every (state, action) pair of `||policy(state) - action||^2`.
pub fn policy_action_loss(policy: &dyn ActionPolicy, ds: &DemoDataset) -> Result<LossReport> {
    if ds.num_steps() == 0 {
        return Err(usage_err!("cannot evaluate a loss on an empty dataset"));
    }
    check_stats(policy.stats_fingerprint(), ds.normalization.as_deref())?;
    let batch = ds.step_batch();
    let pred = policy.act_batch(batch.states.view())?;
    if pred.dim() != batch.actions.dim() {
        return Err(shape_err!("policy output {:?} vs actions {:?}", pred.dim(), batch.actions.dim()));
    }
    let diff = pred - &batch.actions;
    let value = row_sq_sum(&diff) / batch.len() as f64;
    if !value.is_finite() {
        return Err(MilError::Numeric("action loss".into()));
    }
    Ok(LossReport {
        value,
        num_steps: batch.len(),
    })
}

/// Training loss of a masked policy on `train`.
pub fn imitation_loss(params: &PolicyParams, mask: &MaskVector, train: &DemoDataset) -> Result<LossReport> {
    policy_action_loss(&MaskedPolicy::new(params, mask), train)
}

/// Held-out action loss; the same arithmetic as [`imitation_loss`].
pub fn action_validation_loss(params: &PolicyParams, mask: &MaskVector, val: &DemoDataset) -> Result<LossReport> {
    policy_action_loss(&MaskedPolicy::new(params, mask), val)
}

/// A policy carrying a normalization fingerprint only accepts data
/// normalized with the same statistics.
pub(crate) fn check_stats(policy_fp: Option<&str>, data_fp: Option<&str>) -> Result<()> {
    match policy_fp {
        Some(p) if Some(p) != data_fp => Err(usage_err!(
            "policy expects statistics {p} but data carries {}",
            data_fp.unwrap_or("none")
        )),
        _ => Ok(()),
    }
}
