//! Comparison methods: unmasked behavior cloning, mask dropout, averages over
//! random masks, continuous masks, a designer-chosen oracle mask, exhaustive
//! mask search, and post-hoc mask selection for a fixed policy.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bilevel::{train_inner, LossKind, MaskEvaluator, TrainedPolicy, TrainingEvaluator, ValBundle};
use crate::datasets::{DemoDataset, NormStats, Role};
use crate::diffnet::Parameters;
use crate::envbench::{EnvSpec, CORRIDOR_TWO_STAGE, DISTRACTOR_REGRESSION, SHIFTED_GOAL_REACH};
use crate::error::{usage_err, MilError, Result};
use crate::losses::policy_action_loss;
use crate::policy::{ActionPolicy, MaskVector, MaskedPolicy, PolicyParams};
use crate::seed;
use crate::training::{fit, InnerTrainConfig};

/// Largest modality count for which every mask is enumerated.
pub const MAX_EXHAUSTIVE_MODALITIES: usize = 12;
pub const DEFAULT_P_DROP: f64 = 0.5;
pub const DEFAULT_K_MASKS: usize = 5;
/// Weights tried for the extra modality in the fixed continuous-mask sweep.
pub const FIXED_WEIGHT_SWEEP: [f64; 6] = [0.0, 0.03, 0.06, 0.09, 0.12, 0.15];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMetric {
    /// Mean squared action error on test demonstrations.
    Mse,
    /// Mean online return in the test environment.
    Return,
    /// Online success rate in the test environment.
    SuccessRate,
}

impl TestMetric {
    pub fn for_env(env: &EnvSpec) -> Self {
        match env.name() {
            DISTRACTOR_REGRESSION => TestMetric::Mse,
            SHIFTED_GOAL_REACH => TestMetric::Return,
            CORRIDOR_TWO_STAGE => TestMetric::SuccessRate,
            other => unreachable!("unregistered environment {other}"),
        }
    }

    pub fn higher_is_better(self) -> bool {
        !matches!(self, TestMetric::Mse)
    }
}

impl fmt::Display for TestMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TestMetric::Mse => "mse",
            TestMetric::Return => "return",
            TestMetric::SuccessRate => "success_rate",
        })
    }
}

impl FromStr for TestMetric {
    type Err = MilError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(TestMetric::Mse),
            "return" => Ok(TestMetric::Return),
            "success_rate" => Ok(TestMetric::SuccessRate),
            other => Err(usage_err!("unknown test metric {other:?}")),
        }
    }
}

/// Scores trained policies in the test role.
#[derive(Debug, Clone)]
pub struct TestHarness {
    pub env: EnvSpec,
    /// Test demonstrations normalized with the training statistics.
    pub test: DemoDataset,
    pub stats: NormStats,
    pub metric: TestMetric,
    pub episodes: usize,
    pub seed: u64,
}

impl TestHarness {
    pub fn new(env: EnvSpec, test: DemoDataset, stats: NormStats, episodes: usize, seed_value: u64) -> Result<Self> {
        if test.normalization.as_deref() != Some(stats.fingerprint().as_str()) {
            return Err(usage_err!("test data must be normalized with the given statistics"));
        }
        Ok(Self {
            metric: TestMetric::for_env(&env),
            env,
            test,
            stats,
            episodes,
            seed: seed_value,
        })
    }

    pub fn score(&self, policy: &dyn ActionPolicy) -> Result<f64> {
        match self.metric {
            TestMetric::Mse => Ok(policy_action_loss(policy, &self.test)?.value),
            TestMetric::Return | TestMetric::SuccessRate => {
                let r = self
                    .env
                    .evaluate_policy_online(Role::Test, policy, Some(&self.stats), self.episodes, self.seed)?;
                Ok(if self.metric == TestMetric::Return {
                    r.mean_return
                } else {
                    r.success_rate
                })
            }
        }
    }

    pub fn score_masked(&self, params: &PolicyParams, mask: &MaskVector) -> Result<f64> {
        self.score(&MaskedPolicy::new(params, mask))
    }
}

/// What a method fed through the gates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Selector {
    Mask(MaskVector),
    Weights(Vec<f64>),
    Masks(Vec<MaskVector>),
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selector::Mask(m) => write!(f, "{m}"),
            Selector::Weights(w) => {
                let parts: Vec<String> = w.iter().map(|x| format!("{x:.4}")).collect();
                write!(f, "[{}]", parts.join(" "))
            }
            Selector::Masks(ms) => {
                let parts: Vec<String> = ms.iter().map(MaskVector::to_string).collect();
                write!(f, "{}", parts.join("|"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub seed: u64,
    pub selector: Selector,
    pub test_metric: f64,
    pub val_loss: Option<f64>,
}

/// One method's test metric aggregated over runs (seeds, or sampled masks
/// for MaskAverage). `std` is the sample standard deviation and is present
/// only with two or more runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub method: String,
    pub metric: TestMetric,
    pub runs: Vec<RunScore>,
    pub mean: f64,
    pub std: Option<f64>,
    pub val_loss: Option<f64>,
    pub note: Option<String>,
}

impl BaselineResult {
    pub fn from_runs(method: impl Into<String>, metric: TestMetric, runs: Vec<RunScore>) -> Result<Self> {
        if runs.is_empty() {
            return Err(usage_err!("a baseline result needs at least one run"));
        }
        let values: Vec<f64> = runs.iter().map(|r| r.test_metric).collect();
        let (mean, std) = mean_std(&values);
        let vals: Vec<f64> = runs.iter().filter_map(|r| r.val_loss).collect();
        let val_loss = (vals.len() == runs.len()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
        Ok(Self {
            method: method.into(),
            metric,
            runs,
            mean,
            std,
            val_loss,
            note: None,
        })
    }

    /// The selector shared by every run, if there is one.
    pub fn selector(&self) -> Option<&Selector> {
        let first = &self.runs[0].selector;
        self.runs.iter().all(|r| &r.selector == first).then_some(first)
    }
}

/// Mean and sample standard deviation (absent below two values).
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() >= 2)
        .then(|| (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

/// Behavior cloning on every modality.
pub fn train_bc_nomask(train: &DemoDataset, config: &InnerTrainConfig, seed_value: u64) -> Result<TrainedPolicy> {
    train_inner(&MaskVector::ones(train.schema.len()), train, config, seed_value)
}

/// Behavior cloning under a designer-chosen mask.
pub fn train_oracle_mask(
    train: &DemoDataset,
    config: &InnerTrainConfig,
    seed_value: u64,
    oracle: &MaskVector,
) -> Result<TrainedPolicy> {
    train_inner(oracle, train, config, seed_value)
}

/// Resamples every mask bit from Bernoulli(1 - p_drop) before each optimizer
/// update. The returned policy is meant to be run with the all-ones mask.
pub fn train_mask_dropout(
    train: &DemoDataset,
    config: &InnerTrainConfig,
    seed_value: u64,
    p_drop: f64,
) -> Result<TrainedPolicy> {
    if !(0.0..1.0).contains(&p_drop) {
        return Err(usage_err!("p_drop must lie in [0, 1), got {p_drop}"));
    }
    let m = train.schema.len();
    let init = PolicyParams::init(&train.schema, &config.policy, seed_value)?
        .with_stats_fingerprint(train.normalization.clone());
    let mut rng = seed::rng(seed::derive_str(seed_value, "dropout"));
    let out = fit(init, &train.step_batch(), config, seed::derive_str(seed_value, "shuffle"), |p, b| {
        let gates: Vec<f64> = (0..m)
            .map(|_| if rng.random_bool(1.0 - p_drop) { 1.0 } else { 0.0 })
            .collect();
        let (loss, grads, _) = p.loss_and_grads_gated(&gates, b)?;
        Ok((loss, grads))
    })?;
    Ok(TrainedPolicy {
        params: out.params,
        final_train_loss: out.best_loss,
        epochs: out.epochs,
    })
}

#[derive(Debug, Clone)]
struct LogitGated {
    policy: PolicyParams,
    logits: Vec<f64>,
}

impl Parameters for LogitGated {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.policy.tensors();
        t.push(&self.logits);
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.policy.tensors_mut();
        t.push(&mut self.logits);
        t
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Gates with values in [0, 1]. Without `fixed_weights`, one logit per
/// modality starts at 0 and is trained jointly with the policy; the weights
/// are its logistic. With `fixed_weights`, the gates stay at those values.
pub fn train_continuous_mask(
    train: &DemoDataset,
    config: &InnerTrainConfig,
    seed_value: u64,
    fixed_weights: Option<&[f64]>,
) -> Result<(TrainedPolicy, Vec<f64>)> {
    let m = train.schema.len();
    let init = PolicyParams::init(&train.schema, &config.policy, seed_value)?
        .with_stats_fingerprint(train.normalization.clone());
    let batch = train.step_batch();
    let shuffle = seed::derive_str(seed_value, "shuffle");
    if let Some(w) = fixed_weights {
        if w.len() != m || w.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(usage_err!("fixed weights must be {m} values in [0, 1]"));
        }
        let out = fit(init, &batch, config, shuffle, |p, b| {
            let (loss, grads, _) = p.loss_and_grads_gated(w, b)?;
            Ok((loss, grads))
        })?;
        let trained = TrainedPolicy {
            params: out.params,
            final_train_loss: out.best_loss,
            epochs: out.epochs,
        };
        return Ok((trained, w.to_vec()));
    }
    let start = LogitGated {
        policy: init,
        logits: vec![0.0; m],
    };
    let out = fit(start, &batch, config, shuffle, |p, b| {
        let gates: Vec<f64> = p.logits.iter().map(|&z| logistic(z)).collect();
        let (loss, grads, gate_grads) = p.policy.loss_and_grads_gated(&gates, b)?;
        let logits = gate_grads.iter().zip(&gates).map(|(g, s)| g * s * (1.0 - s)).collect();
        Ok((loss, LogitGated { policy: grads, logits }))
    })?;
    let weights = out.params.logits.iter().map(|&z| logistic(z)).collect();
    let trained = TrainedPolicy {
        params: out.params.policy,
        final_train_loss: out.best_loss,
        epochs: out.epochs,
    };
    Ok((trained, weights))
}

/// Trains one policy per sampled mask and averages their test metric. Masks
/// are `k` distinct non-empty masks drawn uniformly from one seed stream; if
/// fewer than `k` exist, all of them are used and the result carries a note.
pub fn mask_average(
    evaluator: &TrainingEvaluator<'_>,
    harness: &TestHarness,
    k: usize,
    seed_value: u64,
) -> Result<BaselineResult> {
    if k == 0 {
        return Err(usage_err!("mask_average needs k >= 1"));
    }
    let m = evaluator.num_modalities();
    let available = (1u64 << m) - 1;
    let k_eff = (k as u64).min(available) as usize;
    let mut rng = seed::rng(seed::derive_str(seed_value, "mask-average"));
    let mut chosen = BTreeSet::new();
    let mut order = Vec::with_capacity(k_eff);
    while order.len() < k_eff {
        let code = rng.random_range(1..=available);
        if chosen.insert(code) {
            order.push(MaskVector::from_index(code, m));
        }
    }
    let mut runs = Vec::with_capacity(k_eff);
    for mask in order {
        let eval = evaluator.evaluate(&mask)?;
        let params = eval.params.as_ref().expect("training evaluator keeps parameters");
        runs.push(RunScore {
            seed: seed_value,
            test_metric: harness.score_masked(params, &mask)?,
            val_loss: Some(eval.l_out),
            selector: Selector::Mask(mask),
        });
    }
    let mut result = BaselineResult::from_runs("mask_average", harness.metric, runs)?;
    if k_eff < k {
        result.note = Some(format!("only {k_eff} non-empty masks exist for {m} modalities; requested {k}"));
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedMask {
    pub mask: MaskVector,
    pub l_out: f64,
    pub test_metric: Option<f64>,
}

/// Ascending loss; ties go to the mask with more ones, then to the smaller
/// bit string.
fn rank_order(a: &MaskVector, la: f64, b: &MaskVector, lb: f64) -> Ordering {
    la.total_cmp(&lb)
        .then_with(|| b.count_ones().cmp(&a.count_ones()))
        .then_with(|| a.to_string().cmp(&b.to_string()))
}

fn all_masks(m: usize, include_empty: bool) -> Result<impl Iterator<Item = MaskVector>> {
    if m > MAX_EXHAUSTIVE_MODALITIES {
        return Err(usage_err!(
            "{m} modalities is too many to enumerate (limit {MAX_EXHAUSTIVE_MODALITIES}); use coordinate descent instead"
        ));
    }
    Ok(MaskVector::all(m).filter(move |mask| include_empty || !mask.is_all_zeros()))
}

/// Scores every mask and ranks them by outer loss. The empty mask is only
/// included on request. With a harness, each trained policy also gets a test
/// metric.
pub fn brute_force_oracle(
    evaluator: &dyn MaskEvaluator,
    include_empty: bool,
    harness: Option<&TestHarness>,
) -> Result<Vec<RankedMask>> {
    let mut ranked = Vec::new();
    for mask in all_masks(evaluator.num_modalities(), include_empty)? {
        let eval = evaluator.evaluate(&mask)?;
        let test_metric = match (harness, &eval.params) {
            (Some(h), Some(p)) => Some(h.score_masked(p, &mask)?),
            _ => None,
        };
        ranked.push(RankedMask {
            mask,
            l_out: eval.l_out,
            test_metric,
        });
    }
    ranked.sort_by(|a, b| rank_order(&a.mask, a.l_out, &b.mask, b.l_out));
    Ok(ranked)
}

/// Evaluates a fixed, already trained policy under every non-empty mask and
/// returns the mask with the lowest outer loss.
pub fn select_mask_post_hoc(params: &PolicyParams, bundle: &ValBundle, kind: LossKind) -> Result<(MaskVector, f64)> {
    let mut best: Option<(MaskVector, f64)> = None;
    for mask in all_masks(params.schema.len(), false)? {
        let l = bundle.outer_loss(kind, params, &mask)?;
        let better = match &best {
            None => true,
            Some((bm, bl)) => rank_order(&mask, l, bm, *bl) == Ordering::Less,
        };
        if better {
            best = Some((mask, l));
        }
    }
    best.ok_or_else(|| usage_err!("no masks to select from"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bilevel::{MaskCache, StubLossTable};
    use crate::envbench::DISTRACTOR_REGRESSION;

    fn distractor(n: usize, seed_value: u64) -> (EnvSpec, DemoDataset, DemoDataset, NormStats) {
        let env = EnvSpec::by_name(DISTRACTOR_REGRESSION).unwrap();
        let train = env.generate_demos(Role::Train, n, seed_value).unwrap();
        let val = env.generate_demos(Role::Val, 10, seed_value).unwrap();
        let stats = NormStats::compute(&train).unwrap();
        (env, train.normalized(&stats).unwrap(), val.normalized(&stats).unwrap(), stats)
    }

    fn quick() -> InnerTrainConfig {
        let mut c = InnerTrainConfig {
            max_epochs: 30,
            ..Default::default()
        };
        c.policy.head_hidden = 8;
        c
    }

    #[test]
    fn stub_ranking_with_empty_mask() {
        let stub = StubLossTable::new([("11", 1.0), ("01", 0.2), ("10", 0.5), ("00", 0.9)]).unwrap();
        let ranked = brute_force_oracle(&stub, true, None).unwrap();
        let got: Vec<(String, f64)> = ranked.iter().map(|r| (r.mask.to_string(), r.l_out)).collect();
        let want = [("01", 0.2), ("10", 0.5), ("00", 0.9), ("11", 1.0)];
        assert_eq!(got, want.map(|(m, l)| (m.to_string(), l)));
        assert_eq!(brute_force_oracle(&stub, false, None).unwrap().len(), 3);
    }

    #[test]
    fn ties_prefer_more_ones_then_smaller_string() {
        let stub = StubLossTable::constant(2, 0.5);
        let order: Vec<String> = brute_force_oracle(&stub, true, None)
            .unwrap()
            .iter()
            .map(|r| r.mask.to_string())
            .collect();
        assert_eq!(order, ["11", "01", "10", "00"]);
    }

    #[test]
    fn too_many_modalities_is_usage_error() {
        let stub = StubLossTable::constant(13, 0.0);
        assert!(matches!(brute_force_oracle(&stub, false, None), Err(MilError::Usage(_))));
    }

    #[test]
    fn bc_nomask_is_all_ones_training() {
        let (_, train, _, _) = distractor(20, 1);
        let a = train_bc_nomask(&train, &quick(), 7).unwrap();
        let b = train_inner(&MaskVector::ones(4), &train, &quick(), 7).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn zero_dropout_matches_bc() {
        let (_, train, _, _) = distractor(20, 1);
        let a = train_mask_dropout(&train, &quick(), 3, 0.0).unwrap();
        let b = train_bc_nomask(&train, &quick(), 3).unwrap();
        assert_eq!(a.params, b.params);
        let c = train_mask_dropout(&train, &quick(), 3, 0.5).unwrap();
        let d = train_mask_dropout(&train, &quick(), 3, 0.5).unwrap();
        assert_eq!(c.params, d.params);
        assert_ne!(c.params, a.params);
        assert!(train_mask_dropout(&train, &quick(), 3, 1.0).is_err());
    }

    #[test]
    fn fixed_binary_weights_match_oracle_training() {
        let (env, train, _, _) = distractor(20, 2);
        let oracle = env.oracle_mask();
        let (cont, w) = train_continuous_mask(&train, &quick(), 5, Some(&oracle.gates())).unwrap();
        let direct = train_oracle_mask(&train, &quick(), 5, &oracle).unwrap();
        assert_eq!(cont.params, direct.params);
        assert_eq!(w, oracle.gates());
        assert!(train_continuous_mask(&train, &quick(), 5, Some(&[0.5, 1.2, 0.0, 0.0])).is_err());
    }

    #[test]
    fn learned_weights_stay_inside_unit_interval() {
        let (_, train, _, _) = distractor(20, 3);
        let mut zero_epochs = quick();
        zero_epochs.max_epochs = 1;
        let (_, w0) = train_continuous_mask(&train, &zero_epochs, 1, None).unwrap();
        assert_eq!(w0, vec![0.5; 4]);
        let (_, w) = train_continuous_mask(&train, &quick(), 1, None).unwrap();
        assert!(w.iter().all(|&x| x > 0.0 && x < 1.0));
        assert_ne!(w, vec![0.5; 4]);
    }

    #[test]
    fn mask_average_draws_distinct_nonempty_masks() {
        let (env, train, val, stats) = distractor(20, 4);
        let test = env.generate_demos(Role::Test, 10, 4).unwrap().normalized(&stats).unwrap();
        let harness = TestHarness::new(env, test, stats, 1, 0).unwrap();
        let bundle = ValBundle::new(val);
        let config = quick();
        let cache = MaskCache::new();
        let ev = TrainingEvaluator::new(&train, &bundle, &config, LossKind::Action, &cache).unwrap();
        let r = mask_average(&ev, &harness, 20, 9).unwrap();
        assert_eq!(r.runs.len(), 15);
        assert!(r.note.is_some());
        let masks: BTreeSet<String> = r.runs.iter().map(|x| x.selector.to_string()).collect();
        assert_eq!(masks.len(), 15);
        assert!(!masks.contains("0000"));
        let again = mask_average(&ev, &harness, 20, 9).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn post_hoc_ties_keep_bits_on() {
        let (_, train, val, _) = distractor(20, 5);
        let mut trained = train_bc_nomask(&train, &quick(), 1).unwrap().params;
        for t in trained.head.tensors_mut() {
            t.fill(0.0);
        }
        let (mask, _) = select_mask_post_hoc(&trained, &ValBundle::new(val), LossKind::Action).unwrap();
        assert_eq!(mask.to_string(), "1111");
    }

    #[test]
    fn aggregation_hand_values() {
        let run = |v: f64| RunScore {
            seed: 0,
            selector: Selector::Mask(MaskVector::ones(1)),
            test_metric: v,
            val_loss: None,
        };
        let r = BaselineResult::from_runs("x", TestMetric::Mse, vec![run(1.0), run(3.0)]).unwrap();
        assert_eq!((r.mean, r.std), (2.0, Some(2f64.sqrt())));
        assert_eq!(r.val_loss, None);
        let one = BaselineResult::from_runs("x", TestMetric::Mse, vec![run(4.0)]).unwrap();
        assert_eq!(one.std, None);
        assert!(BaselineResult::from_runs("x", TestMetric::Mse, vec![]).is_err());
    }
}
