//! Deterministic benchmark environments with scripted experts and a
//! role-dependent shift on one observed modality.
//!
//! * `shifted-goal-reach`: 2-D point mass, `pos' = pos + a`. Modalities:
//!   target offset (used by the expert), absolute target (shifted between
//!   train and val/test), velocity (last action), and an exact copy of the
//!   offset.
//! * `distractor-regression`: one-step regression `a* = W·signal`, with a
//!   copy of the signal whose bias flips sign between train and val/test, and
//!   two pure-noise modalities.
//! * `corridor-two-stage`: 1-D corridor, visit a waypoint then return past
//!   the start to a goal. Modalities: waypoint offset, goal offset, absolute
//!   position (shifted), and a clock phase `t / T`.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::datasets::{DemoDataset, NormStats, Role, Trajectory};
use crate::error::{shape_err, usage_err, MilError, Result};
use crate::policy::{ActionPolicy, MaskVector, ModalitySchema};
use crate::seed;

pub const SHIFTED_GOAL_REACH: &str = "shifted-goal-reach";
pub const DISTRACTOR_REGRESSION: &str = "distractor-regression";
pub const CORRIDOR_TWO_STAGE: &str = "corridor-two-stage";
pub const ENV_NAMES: [&str; 3] = [SHIFTED_GOAL_REACH, DISTRACTOR_REGRESSION, CORRIDOR_TWO_STAGE];

/// Per-step reward assigned when a policy emits a non-finite action.
pub const WORST_STEP_REWARD: f64 = -1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReachParams {
    pub horizon: usize,
    pub gain: f64,
    pub max_step: f64,
    pub success_tolerance: f64,
    pub offset_half_width: f64,
    pub target_x_half_width: f64,
    pub train_target_y: [f64; 2],
    pub shifted_target_y: [f64; 2],
    pub include_duplicate: bool,
}

impl Default for ReachParams {
    fn default() -> Self {
        Self {
            horizon: 25,
            gain: 0.25,
            max_step: 0.2,
            success_tolerance: 0.05,
            offset_half_width: 1.0,
            target_x_half_width: 1.0,
            train_target_y: [0.5, 1.5],
            shifted_target_y: [-1.5, -0.5],
            include_duplicate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistractorParams {
    pub signal_half_width: f64,
    pub noise_half_width: f64,
    pub train_bias: [f64; 2],
    pub shifted_bias: [f64; 2],
    pub weight: [[f64; 2]; 2],
    pub success_tolerance: f64,
}

impl Default for DistractorParams {
    fn default() -> Self {
        Self {
            signal_half_width: 1.0,
            noise_half_width: 1.0,
            train_bias: [2.0, 2.0],
            shifted_bias: [-2.0, -2.0],
            weight: [[1.0, 0.5], [-0.5, 1.0]],
            success_tolerance: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorridorParams {
    pub horizon: usize,
    pub gain: f64,
    pub max_step: f64,
    pub success_tolerance: f64,
    pub start_half_width: f64,
    pub train_center: f64,
    pub shifted_center: f64,
    pub waypoint_distance: [f64; 2],
    pub return_distance: [f64; 2],
}

impl Default for CorridorParams {
    fn default() -> Self {
        Self {
            horizon: 40,
            gain: 0.25,
            max_step: 0.2,
            success_tolerance: 0.05,
            start_half_width: 0.5,
            train_center: -3.0,
            shifted_center: 3.0,
            waypoint_distance: [0.5, 1.0],
            return_distance: [2.2, 2.7],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum EnvParams {
    ShiftedGoalReach(ReachParams),
    DistractorRegression(DistractorParams),
    CorridorTwoStage(CorridorParams),
}

impl EnvParams {
    pub fn default_for(name: &str) -> Result<Self> {
        match name {
            SHIFTED_GOAL_REACH => Ok(Self::ShiftedGoalReach(ReachParams::default())),
            DISTRACTOR_REGRESSION => Ok(Self::DistractorRegression(DistractorParams::default())),
            CORRIDOR_TWO_STAGE => Ok(Self::CorridorTwoStage(CorridorParams::default())),
            other => Err(usage_err!(
                "unknown environment {other:?}; expected one of {}",
                ENV_NAMES.join(", ")
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::ShiftedGoalReach(_) => SHIFTED_GOAL_REACH,
            Self::DistractorRegression(_) => DISTRACTOR_REGRESSION,
            Self::CorridorTwoStage(_) => CORRIDOR_TWO_STAGE,
        }
    }
}

/// Outcome of one episode in the true simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub ret: f64,
    pub success: bool,
    pub final_state: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnlineEval {
    pub mean_return: f64,
    pub success_rate: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    params: EnvParams,
    schema: ModalitySchema,
}

impl EnvSpec {
    pub fn new(params: EnvParams) -> Result<Self> {
        let schema = match &params {
            EnvParams::ShiftedGoalReach(p) => {
                check_range("train_target_y", p.train_target_y)?;
                check_range("shifted_target_y", p.shifted_target_y)?;
                check_positive("max_step", p.max_step)?;
                check_positive("horizon", p.horizon as f64)?;
                let mut mods = vec![("offset", 2), ("target", 2), ("velocity", 2)];
                if p.include_duplicate {
                    mods.push(("offset_copy", 2));
                }
                ModalitySchema::new(mods, 2)?
            }
            EnvParams::DistractorRegression(_) => ModalitySchema::new(
                [("signal", 2), ("shifted_copy", 2), ("noise_a", 2), ("noise_b", 2)],
                2,
            )?,
            EnvParams::CorridorTwoStage(p) => {
                check_range("waypoint_distance", p.waypoint_distance)?;
                check_range("return_distance", p.return_distance)?;
                check_positive("max_step", p.max_step)?;
                if p.horizon < 2 || p.horizon % 2 != 0 {
                    return Err(usage_err!("corridor horizon must be even and at least 2"));
                }
                ModalitySchema::new(
                    [("waypoint_offset", 1), ("goal_offset", 1), ("position", 1), ("phase", 1)],
                    1,
                )?
            }
        };
        Ok(Self { params, schema })
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Self::new(EnvParams::default_for(name)?)
    }

    /// Default parameters for `name` with the given keys replaced.
    pub fn with_overrides(name: &str, overrides: &toml::Table) -> Result<Self> {
        fn merge<P: Serialize + DeserializeOwned>(p: &P, o: &toml::Table) -> Result<P> {
            let mut table = toml::Table::try_from(p).map_err(|e| MilError::Serde(e.to_string()))?;
            for (k, v) in o {
                table.insert(k.clone(), v.clone());
            }
            table
                .try_into()
                .map_err(|e: toml::de::Error| usage_err!("bad environment override: {}", e.message()))
        }
        let params = match EnvParams::default_for(name)? {
            EnvParams::ShiftedGoalReach(p) => EnvParams::ShiftedGoalReach(merge(&p, overrides)?),
            EnvParams::DistractorRegression(p) => EnvParams::DistractorRegression(merge(&p, overrides)?),
            EnvParams::CorridorTwoStage(p) => EnvParams::CorridorTwoStage(merge(&p, overrides)?),
        };
        Self::new(params)
    }

    pub fn name(&self) -> &'static str {
        self.params.name()
    }

    pub fn params(&self) -> &EnvParams {
        &self.params
    }

    pub fn schema(&self) -> &ModalitySchema {
        &self.schema
    }

    pub fn horizon(&self) -> usize {
        match &self.params {
            EnvParams::ShiftedGoalReach(p) => p.horizon,
            EnvParams::DistractorRegression(_) => 1,
            EnvParams::CorridorTwoStage(p) => p.horizon,
        }
    }

    /// Mask that removes exactly the shifted modality.
    pub fn oracle_mask(&self) -> MaskVector {
        let shifted = self.shifted_modality();
        let mut bits = vec![1u8; self.schema.len()];
        bits[shifted] = 0;
        MaskVector::from_bits(&bits).expect("binary bits")
    }

    /// Index of the modality whose distribution moves between roles.
    pub fn shifted_modality(&self) -> usize {
        match &self.params {
            EnvParams::ShiftedGoalReach(_) | EnvParams::DistractorRegression(_) => 1,
            EnvParams::CorridorTwoStage(_) => 2,
        }
    }

    /// Index of the modality the expert reads.
    pub fn invariant_modality(&self) -> usize {
        0
    }

    fn check_state(&self, state: &[f64]) -> Result<()> {
        if state.len() != self.schema.state_dim() {
            return Err(shape_err!("state has {} values, schema expects {}", state.len(), self.schema.state_dim()));
        }
        Ok(())
    }

    fn check_action(&self, action: &[f64]) -> Result<()> {
        if action.len() != self.schema.action_dim() {
            return Err(shape_err!(
                "action has {} values, schema expects {}",
                action.len(),
                self.schema.action_dim()
            ));
        }
        Ok(())
    }

    /// Deterministic transition on raw (unnormalized) states.
    pub fn step(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        self.check_state(state)?;
        self.check_action(action)?;
        let mut next = state.to_vec();
        match &self.params {
            EnvParams::ShiftedGoalReach(p) => {
                next[0] = state[0] - action[0];
                next[1] = state[1] - action[1];
                next[4] = action[0];
                next[5] = action[1];
                if p.include_duplicate {
                    next[6] = next[0];
                    next[7] = next[1];
                }
            }
            EnvParams::DistractorRegression(_) => {}
            EnvParams::CorridorTwoStage(p) => {
                let a = action[0].clamp(-p.max_step, p.max_step);
                let t = p.horizon as f64;
                next[0] = state[0] - a;
                next[1] = state[1] - a;
                next[2] = state[2] + a;
                next[3] = ((state[3] * t).round() + 1.0) / t;
            }
        }
        Ok(next)
    }

    /// Scripted expert on raw states; reads only the invariant modalities.
    pub fn expert_action(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.check_state(state)?;
        Ok(match &self.params {
            EnvParams::ShiftedGoalReach(p) => {
                let mut a = [p.gain * state[0], p.gain * state[1]];
                let norm = a[0].hypot(a[1]);
                if norm > p.max_step {
                    a[0] *= p.max_step / norm;
                    a[1] *= p.max_step / norm;
                }
                a.to_vec()
            }
            EnvParams::DistractorRegression(p) => {
                let w = p.weight;
                vec![
                    w[0][0] * state[0] + w[0][1] * state[1],
                    w[1][0] * state[0] + w[1][1] * state[1],
                ]
            }
            EnvParams::CorridorTwoStage(p) => {
                let offset = if corridor_first_stage(p, state[3]) { state[0] } else { state[1] };
                vec![(p.gain * offset).clamp(-p.max_step, p.max_step)]
            }
        })
    }

    pub fn reward(&self, state: &[f64], action: &[f64], next: &[f64]) -> Result<f64> {
        self.check_action(action)?;
        Ok(match &self.params {
            EnvParams::ShiftedGoalReach(_) => -(next[0] * next[0] + next[1] * next[1]),
            EnvParams::DistractorRegression(_) => {
                let target = self.expert_action(state)?;
                -target.iter().zip(action).map(|(t, a)| (t - a) * (t - a)).sum::<f64>()
            }
            EnvParams::CorridorTwoStage(_) => -(next[1] * next[1]),
        })
    }

    /// Success predicate over an episode: `states` holds every visited state
    /// including the one after the last action.
    pub fn is_success(&self, states: &[Vec<f64>], actions: &[Vec<f64>]) -> bool {
        match &self.params {
            EnvParams::ShiftedGoalReach(p) => states
                .last()
                .is_some_and(|s| s[0].hypot(s[1]) < p.success_tolerance),
            EnvParams::DistractorRegression(p) => match (states.first(), actions.first()) {
                (Some(s), Some(a)) => self.expert_action(s).is_ok_and(|t| {
                    let d2: f64 = t.iter().zip(a).map(|(t, a)| (t - a) * (t - a)).sum();
                    d2.sqrt() < p.success_tolerance
                }),
                _ => false,
            },
            EnvParams::CorridorTwoStage(p) => states.iter().any(|s| s[1].abs() < p.success_tolerance),
        }
    }

    pub fn sample_initial_state(&self, role: Role, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let shifted = match role {
            Role::Train => false,
            Role::Val | Role::Test => true,
            Role::Augmented => return Err(usage_err!("no initial-state region for the augmented role")),
        };
        Ok(match &self.params {
            EnvParams::ShiftedGoalReach(p) => {
                let range = if shifted { p.shifted_target_y } else { p.train_target_y };
                let tx = uniform(rng, p.target_x_half_width);
                let ty = rng.random_range(range[0]..=range[1]);
                let ox = uniform(rng, p.offset_half_width);
                let oy = uniform(rng, p.offset_half_width);
                let mut s = vec![ox, oy, tx, ty, 0.0, 0.0];
                if p.include_duplicate {
                    s.extend([ox, oy]);
                }
                s
            }
            EnvParams::DistractorRegression(p) => {
                let bias = if shifted { p.shifted_bias } else { p.train_bias };
                let x = [uniform(rng, p.signal_half_width), uniform(rng, p.signal_half_width)];
                let mut s = vec![x[0], x[1], x[0] + bias[0], x[1] + bias[1]];
                s.extend((0..4).map(|_| uniform(rng, p.noise_half_width)));
                s
            }
            EnvParams::CorridorTwoStage(p) => {
                let center = if shifted { p.shifted_center } else { p.train_center };
                let pos = center + uniform(rng, p.start_half_width);
                let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let d1 = rng.random_range(p.waypoint_distance[0]..=p.waypoint_distance[1]);
                let d2 = rng.random_range(p.return_distance[0]..=p.return_distance[1]);
                let waypoint = pos + dir * d1;
                let goal = waypoint - dir * d2;
                vec![waypoint - pos, goal - pos, pos, 0.0]
            }
        })
    }

    /// Runs `act` from `initial` for `length` steps in the true simulator.
    /// Returns the visited states (`length + 1` of them) and the actions.
    /// Stops early if `act` yields a non-finite action.
    pub fn run<F>(&self, initial: &[f64], length: usize, mut act: F) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, bool)>
    where
        F: FnMut(&[f64]) -> Result<Vec<f64>>,
    {
        self.check_state(initial)?;
        let mut states = vec![initial.to_vec()];
        let mut actions = Vec::with_capacity(length);
        for _ in 0..length {
            let s = states.last().expect("nonempty");
            let a = act(s)?;
            self.check_action(&a)?;
            if a.iter().any(|v| !v.is_finite()) {
                return Ok((states, actions, false));
            }
            let next = self.step(s, &a)?;
            actions.push(a);
            states.push(next);
        }
        Ok((states, actions, true))
    }

    pub fn expert_trajectory(&self, initial: &[f64], length: usize) -> Result<Trajectory> {
        let (mut states, actions, _) = self.run(initial, length, |s| self.expert_action(s))?;
        states.pop();
        Ok(Trajectory::new(states, actions))
    }

    /// Expert demonstrations from the region of `role`.
    pub fn generate_demos(&self, role: Role, n_traj: usize, seed_value: u64) -> Result<DemoDataset> {
        if n_traj == 0 {
            return Err(usage_err!("n_traj must be at least 1"));
        }
        let mut rng = seed::rng(seed::derive_str(seed_value, &format!("demos/{role}")));
        let mut trajectories = Vec::with_capacity(n_traj);
        for _ in 0..n_traj {
            let s0 = self.sample_initial_state(role, &mut rng)?;
            trajectories.push(self.expert_trajectory(&s0, self.horizon())?);
        }
        let mut ds = DemoDataset::new(self.schema.clone(), role, trajectories)?;
        ds.note = Some(format!("{} expert demos, seed {seed_value}", self.name()));
        Ok(ds)
    }

    /// One episode of `policy` from `initial`. When `stats` is given the
    /// policy sees normalized states.
    pub fn run_episode(
        &self,
        policy: &dyn ActionPolicy,
        stats: Option<&NormStats>,
        initial: &[f64],
    ) -> Result<EpisodeResult> {
        let (states, actions, finite) = self.run(initial, self.horizon(), |s| match stats {
            Some(st) => policy.act_one(&st.normalize(s)),
            None => policy.act_one(s),
        })?;
        let final_state = states.last().expect("nonempty").clone();
        if !finite {
            return Ok(EpisodeResult {
                ret: WORST_STEP_REWARD * self.horizon() as f64,
                success: false,
                final_state,
            });
        }
        let mut ret = 0.0;
        for (t, a) in actions.iter().enumerate() {
            ret += self.reward(&states[t], a, &states[t + 1])?;
        }
        Ok(EpisodeResult {
            ret,
            success: self.is_success(&states, &actions),
            final_state,
        })
    }

    /// Mean return and success rate of `policy` over episodes drawn from the
    /// region of `role`.
    pub fn evaluate_policy_online(
        &self,
        role: Role,
        policy: &dyn ActionPolicy,
        stats: Option<&NormStats>,
        n_episodes: usize,
        seed_value: u64,
    ) -> Result<OnlineEval> {
        if n_episodes == 0 {
            return Err(usage_err!("n_episodes must be at least 1"));
        }
        let expected = stats.map(NormStats::fingerprint);
        if let Some(fp) = policy.stats_fingerprint() {
            if expected.as_deref() != Some(fp) {
                return Err(usage_err!("policy was trained on different normalization statistics"));
            }
        }
        let mut rng = seed::rng(seed::derive_str(seed_value, &format!("online/{role}")));
        let mut total = 0.0;
        let mut successes = 0usize;
        for _ in 0..n_episodes {
            let s0 = self.sample_initial_state(role, &mut rng)?;
            let ep = self.run_episode(policy, stats, &s0)?;
            total += ep.ret;
            successes += usize::from(ep.success);
        }
        Ok(OnlineEval {
            mean_return: total / n_episodes as f64,
            success_rate: successes as f64 / n_episodes as f64,
            episodes: n_episodes,
        })
    }
}

/// The scripted expert as a policy over raw states.
pub struct ExpertPolicy<'a>(pub &'a EnvSpec);

impl ActionPolicy for ExpertPolicy<'_> {
    fn act_batch(&self, states: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let ad = self.0.schema.action_dim();
        let mut out = Array2::zeros((states.nrows(), ad));
        for (i, row) in states.rows().into_iter().enumerate() {
            let a = self.0.expert_action(&row.to_vec())?;
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&a[..]));
        }
        Ok(out)
    }
}

fn corridor_first_stage(p: &CorridorParams, phase: f64) -> bool {
    (phase * p.horizon as f64).round() < (p.horizon / 2) as f64
}

fn uniform(rng: &mut ChaCha8Rng, half_width: f64) -> f64 {
    if half_width == 0.0 {
        0.0
    } else {
        rng.random_range(-half_width..=half_width)
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(usage_err!("{name} must be an ordered finite range, got {r:?}"));
    }
    Ok(())
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(usage_err!("{name} must be positive, got {v}"));
    }
    Ok(())
}
