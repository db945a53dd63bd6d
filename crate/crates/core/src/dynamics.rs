//! Learned forward model, offline rollouts through it, the rollout-based
//! state validation loss, and the success/failure validation loss built on
//! noise-augmented expert trajectories.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{DemoDataset, NormStats, Provenance, Role, StepBatch, Trajectory, STD_FLOOR};
use crate::diffnet::{mean_l2_loss_and_grad, mlp_specs, Activation, NetParams, Parameters};
use crate::envbench::EnvSpec;
use crate::error::{shape_err, usage_err, MilError, Result};
use crate::losses::{check_stats, LossReport};
use crate::policy::ActionPolicy;
use crate::seed;
use crate::training::{fit, InnerTrainConfig};

/// Rollouts stop once any state coordinate exceeds this magnitude.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;
/// Squared distance charged for every step a diverged rollout failed to reach.
pub const DIVERGENCE_PENALTY: f64 = 1e6;
pub const DEFAULT_ALPHAS: [f64; 3] = [0.005, 0.01, 0.05];
/// Noisy rollouts per validation trajectory and noise level.
pub const DEFAULT_COUNT_PER_ALPHA: usize = 1;
pub const DEFAULT_T1: f64 = 0.2;
pub const DEFAULT_T2: f64 = 1.0;
/// Upper bound on the exponent in the success/failure loss.
const MAX_EXPONENT: f64 = 700.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig {
    /// Hidden layer widths; empty gives an affine model.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub train: InnerTrainConfig,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            hidden: Vec::new(),
            activation: Activation::Tanh,
            train: InnerTrainConfig {
                learning_rate: 1e-2,
                max_epochs: 10000,
                plateau_patience: 50,
                plateau_min_rel_improve: 1e-4,
                lr_decay: 0.1,
                min_learning_rate: 1e-5,
                batch_size: 0,
                ..InnerTrainConfig::default()
            },
        }
    }
}

/// Maps (normalized state ++ action) to the next normalized state. Actions
/// are standardized with `action_mean` / `action_std` before entering `net`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams {
    pub net: NetParams,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
    pub stats_fingerprint: Option<String>,
}

impl DynamicsParams {
    pub fn new(net: NetParams, state_dim: usize, action_dim: usize) -> Result<Self> {
        if net.input_dim() != state_dim + action_dim || net.output_dim() != state_dim {
            return Err(shape_err!(
                "dynamics net maps {} -> {}, expected {} -> {state_dim}",
                net.input_dim(),
                net.output_dim(),
                state_dim + action_dim
            ));
        }
        Ok(Self {
            net,
            state_dim,
            action_dim,
            action_mean: vec![0.0; action_dim],
            action_std: vec![1.0; action_dim],
            stats_fingerprint: None,
        })
    }

    pub fn predict(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.state_dim || action.len() != self.action_dim {
            return Err(shape_err!("dynamics input widths {}+{}", state.len(), action.len()));
        }
        let mut x = Vec::with_capacity(self.state_dim + self.action_dim);
        x.extend_from_slice(state);
        x.extend(action.iter().enumerate().map(|(i, a)| (a - self.action_mean[i]) / self.action_std[i]));
        Ok(self.net.forward(&x)?.0)
    }

    /// Rows of (state ++ action), actions not yet standardized.
    pub fn predict_batch(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.net.predict_batch(self.standardize(inputs)?.view())
    }

    fn standardize(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if inputs.ncols() != self.state_dim + self.action_dim {
            return Err(shape_err!("dynamics inputs have {} columns", inputs.ncols()));
        }
        let mut x = inputs.to_owned();
        for i in 0..self.action_dim {
            let (m, s) = (self.action_mean[i], self.action_std[i]);
            x.column_mut(self.state_dim + i).mapv_inplace(|a| (a - m) / s);
        }
        Ok(x)
    }
}

impl Parameters for DynamicsParams {
    fn tensors(&self) -> Vec<&[f64]> {
        self.net.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.net.tensors_mut()
    }

    fn tensor_label(&self, index: usize) -> String {
        format!("dynamics {}", self.net.tensor_label(index))
    }
}

#[derive(Debug, Clone)]
pub struct DynamicsFit {
    pub model: DynamicsParams,
    /// Mean squared next-state error of the returned model.
    pub final_loss: f64,
    pub epochs: usize,
}

/// Fits the forward model to every consecutive pair of steps in `data`.
pub fn fit_dynamics(data: &DemoDataset, config: &DynamicsConfig, seed_value: u64) -> Result<DynamicsFit> {
    let batch = data.transition_batch();
    if batch.is_empty() {
        return Err(usage_err!("dynamics fitting needs trajectories with at least two steps"));
    }
    let sd = data.schema.state_dim();
    let ad = data.schema.action_dim();
    let net = NetParams::init(&mlp_specs(sd + ad, &config.hidden, sd, config.activation), seed_value)?;
    let mut init = DynamicsParams::new(net, sd, ad)?;
    init.stats_fingerprint = data.normalization.clone();
    let n = batch.len() as f64;
    for i in 0..ad {
        let col = batch.states.column(sd + i);
        let mean = col.sum() / n;
        let var = col.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        init.action_mean[i] = mean;
        init.action_std[i] = var.sqrt().max(STD_FLOOR);
    }
    let standardized = StepBatch::new(init.standardize(batch.states.view())?, batch.actions.clone())?;
    let out = fit(init, &standardized, &config.train, seed::derive_str(seed_value, "shuffle"), dynamics_loss_and_grad)?;
    let final_loss = transition_loss(&out.params, &batch)?;
    Ok(DynamicsFit {
        model: out.params,
        final_loss,
        epochs: out.epochs,
    })
}

fn dynamics_loss_and_grad(model: &DynamicsParams, batch: &StepBatch) -> Result<(f64, DynamicsParams)> {
    let (pred, tape) = model.net.forward_batch(batch.states.view())?;
    let (loss, grad) = mean_l2_loss_and_grad(&pred, batch.actions.view())?;
    let (g, _) = model.net.backward(&tape, grad.view())?;
    Ok((
        loss,
        DynamicsParams {
            net: g,
            ..model.clone()
        },
    ))
}

/// Mean squared next-state prediction error over a transition batch.
pub fn transition_loss(model: &DynamicsParams, batch: &StepBatch) -> Result<f64> {
    let pred = model.predict_batch(batch.states.view())?;
    Ok(mean_l2_loss_and_grad(&pred, batch.actions.view())?.0)
}

/// A synthetic trajectory; `states` is shorter than requested when the
/// rollout diverged.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub states: Vec<Vec<f64>>,
    pub requested_len: usize,
}

impl Rollout {
    pub fn diverged(&self) -> bool {
        self.states.len() < self.requested_len
    }
}

/// Rolls `policy` through the learned model for `length` states, the first
/// being `initial`.
pub fn rollout(model: &DynamicsParams, policy: &dyn ActionPolicy, initial: &[f64], length: usize) -> Result<Rollout> {
    if length == 0 {
        return Err(usage_err!("rollout length must be at least 1"));
    }
    if initial.len() != model.state_dim {
        return Err(shape_err!("initial state has {} values, model expects {}", initial.len(), model.state_dim));
    }
    let mut states = Vec::with_capacity(length);
    states.push(initial.to_vec());
    while states.len() < length {
        let s = states.last().expect("nonempty");
        let a = policy.act_one(s)?;
        if a.iter().any(|v| !v.is_finite()) {
            break;
        }
        let next = match model.predict(s, &a) {
            Ok(n) => n,
            Err(MilError::Numeric(_)) => break,
            Err(e) => return Err(e),
        };
        if next.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_THRESHOLD) {
            break;
        }
        states.push(next);
    }
    Ok(Rollout {
        states,
        requested_len: length,
    })
}

/// Mean over paired steps of the squared distance between a rollout from each
/// validation trajectory's first state and that trajectory.
pub fn state_validation_loss(model: &DynamicsParams, policy: &dyn ActionPolicy, val: &DemoDataset) -> Result<LossReport> {
    if val.num_steps() == 0 {
        return Err(usage_err!("state validation loss needs a nonempty validation set"));
    }
    check_stats(model.stats_fingerprint.as_deref(), val.normalization.as_deref())?;
    check_stats(policy.stats_fingerprint(), val.normalization.as_deref())?;
    let mut total = 0.0;
    for t in &val.trajectories {
        let roll = rollout(model, policy, &t.states[0], t.len())?;
        total += paired_sq_distance(&roll, &t.states);
    }
    let n = val.num_steps();
    Ok(LossReport {
        value: total / n as f64,
        num_steps: n,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Summed squared distance over the reference's steps; steps a diverged
/// rollout never reached cost [`DIVERGENCE_PENALTY`] each.
fn paired_sq_distance(roll: &Rollout, reference: &[Vec<f64>]) -> f64 {
    let reached = roll.states.len().min(reference.len());
    let mut total: f64 = (0..reached).map(|i| sq_dist(&roll.states[i], &reference[i])).sum();
    total += (reference.len() - reached) as f64 * DIVERGENCE_PENALTY;
    total
}

/// Noise-augmented expert trajectories split by the environment's success
/// predicate.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedValSets {
    pub success: DemoDataset,
    pub failure: DemoDataset,
}

impl AugmentedValSets {
    pub fn len(&self) -> usize {
        self.success.len() + self.failure.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn normalized(&self, stats: &NormStats) -> Result<Self> {
        Ok(Self {
            success: self.success.normalized(stats)?,
            failure: self.failure.normalized(stats)?,
        })
    }

    /// Both sets as one dataset, successes first.
    pub fn combined(&self) -> Result<DemoDataset> {
        self.success.merge(&self.failure)
    }

    /// Splits a combined set back by each trajectory's recorded outcome.
    pub fn from_combined(ds: &DemoDataset) -> Result<Self> {
        let mut success = Vec::new();
        let mut failure = Vec::new();
        for (i, t) in ds.trajectories.iter().enumerate() {
            match t.success {
                Some(true) => success.push(t.clone()),
                Some(false) => failure.push(t.clone()),
                None => return Err(MilError::Schema(format!("augmented trajectory {i} has no success flag"))),
            }
        }
        let part = |trajectories| -> Result<DemoDataset> {
            let mut out = DemoDataset::new(ds.schema.clone(), ds.role, trajectories)?;
            out.normalization = ds.normalization.clone();
            Ok(out)
        };
        Ok(Self {
            success: part(success)?,
            failure: part(failure)?,
        })
    }

    /// Splits a combined dataset back by its success labels.
    pub fn from_labeled(ds: &DemoDataset) -> Result<Self> {
        let mut success = Vec::new();
        let mut failure = Vec::new();
        for (i, t) in ds.trajectories.iter().enumerate() {
            match t.success {
                Some(true) => success.push(t.clone()),
                Some(false) => failure.push(t.clone()),
                None => return Err(MilError::Schema(format!("augmented trajectory {i} has no success label"))),
            }
        }
        let make = |trajs| -> Result<DemoDataset> {
            let mut d = DemoDataset::new(ds.schema.clone(), Role::Augmented, trajs)?;
            d.normalization = ds.normalization.clone();
            Ok(d)
        };
        Ok(Self {
            success: make(success)?,
            failure: make(failure)?,
        })
    }
}

/// For every raw validation trajectory and every `alpha`, rolls out
/// `count_per_alpha` expert trajectories of the same length whose actions get
/// independent uniform noise in `[-alpha, alpha]` per dimension.
pub fn augment_validation(
    env: &EnvSpec,
    val: &DemoDataset,
    alphas: &[f64],
    count_per_alpha: usize,
    seed_value: u64,
) -> Result<AugmentedValSets> {
    if val.is_empty() {
        return Err(usage_err!("augmentation needs a nonempty validation set"));
    }
    if val.normalization.is_some() {
        return Err(usage_err!("augmentation runs the simulator and needs raw validation states"));
    }
    if val.schema != *env.schema() {
        return Err(MilError::Schema("validation schema does not match the environment".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
        return Err(usage_err!("noise half-width must be finite and nonnegative, got {a}"));
    }
    let mut success = Vec::new();
    let mut failure = Vec::new();
    for (i, src) in val.trajectories.iter().enumerate() {
        for (k, &alpha) in alphas.iter().enumerate() {
            for c in 0..count_per_alpha {
                let traj_seed = seed::derive(seed::derive(seed_value, i as u64), (k * count_per_alpha + c) as u64);
                let mut rng = seed::rng(traj_seed);
                let (mut states, actions, _) = env.run(&src.states[0], src.len(), |s| {
                    let mut a = env.expert_action(s)?;
                    if alpha > 0.0 {
                        for v in &mut a {
                            *v += rng.random_range(-alpha..=alpha);
                        }
                    }
                    Ok(a)
                })?;
                let ok = env.is_success(&states, &actions);
                states.pop();
                let traj = Trajectory {
                    states,
                    actions,
                    success: Some(ok),
                    provenance: Some(Provenance {
                        alpha,
                        seed: traj_seed,
                        source_index: i,
                    }),
                };
                if ok {
                    success.push(traj);
                } else {
                    failure.push(traj);
                }
            }
        }
    }
    Ok(AugmentedValSets {
        success: DemoDataset::new(val.schema.clone(), Role::Augmented, success)?,
        failure: DemoDataset::new(val.schema.clone(), Role::Augmented, failure)?,
    })
}

/// Smallest time-aligned mean squared distance from `roll` to any member of
/// `pool`, each comparison truncated to the shorter of the two.
pub fn nearest_trajectory_distance(roll: &[Vec<f64>], pool: &[&[Vec<f64>]]) -> Result<f64> {
    if pool.is_empty() {
        return Err(usage_err!("nearest-trajectory distance needs a nonempty pool"));
    }
    if roll.is_empty() {
        return Err(usage_err!("cannot measure the distance of an empty trajectory"));
    }
    let mut best = f64::INFINITY;
    for other in pool {
        let n = roll.len().min(other.len());
        if n == 0 {
            continue;
        }
        let d = (0..n).map(|i| sq_dist(&roll[i], &other[i])).sum::<f64>() / n as f64;
        best = best.min(d);
    }
    Ok(best)
}

/// `exp(l_s / t1) - exp(l_f / t2)`, with each exponent capped to stay finite.
pub fn aug_loss_term(l_s: f64, l_f: f64, t1: f64, t2: f64) -> f64 {
    (l_s / t1).min(MAX_EXPONENT).exp() - (l_f / t2).min(MAX_EXPONENT).exp()
}

/// Average over validation-seeded rollouts of [`aug_loss_term`], with `l_s`
/// measured against validation trajectories plus augmented successes and
/// `l_f` against augmented failures. Diverged rollouts are padded with
/// [`DIVERGENCE_PENALTY`] per missing step before measuring.
pub fn aug_validation_loss(
    model: &DynamicsParams,
    policy: &dyn ActionPolicy,
    val: &DemoDataset,
    sets: &AugmentedValSets,
    t1: f64,
    t2: f64,
) -> Result<f64> {
    if !(t1 > 0.0 && t2 > 0.0) {
        return Err(usage_err!("temperatures must be positive"));
    }
    if val.is_empty() {
        return Err(usage_err!("success/failure loss needs a nonempty validation set"));
    }
    if sets.failure.is_empty() {
        return Err(usage_err!("success/failure loss needs at least one failed trajectory"));
    }
    for fp in [&sets.success.normalization, &sets.failure.normalization] {
        if *fp != val.normalization {
            return Err(usage_err!("augmented and validation sets use different normalization"));
        }
    }
    check_stats(model.stats_fingerprint.as_deref(), val.normalization.as_deref())?;
    check_stats(policy.stats_fingerprint(), val.normalization.as_deref())?;
    let success_pool: Vec<&[Vec<f64>]> = val
        .trajectories
        .iter()
        .chain(&sets.success.trajectories)
        .map(|t| t.states.as_slice())
        .collect();
    let failure_pool: Vec<&[Vec<f64>]> = sets.failure.trajectories.iter().map(|t| t.states.as_slice()).collect();
    let mut total = 0.0;
    for t in &val.trajectories {
        let roll = rollout(model, policy, &t.states[0], t.len())?;
        let padded = pad_diverged(&roll);
        let l_s = nearest_trajectory_distance(&padded, &success_pool)?;
        let l_f = nearest_trajectory_distance(&padded, &failure_pool)?;
        total += aug_loss_term(l_s, l_f, t1, t2);
    }
    Ok(total / val.len() as f64)
}

fn pad_diverged(roll: &Rollout) -> Vec<Vec<f64>> {
    let mut states = roll.states.clone();
    let dim = states[0].len();
    // Missing steps sit at the divergence threshold in every coordinate.
    let far = vec![DIVERGENCE_THRESHOLD; dim];
    states.resize(roll.requested_len, far);
    states
}
