//! Acceptance suite. Runs as a plain binary so that every criterion prints
//! exactly one PASS/FAIL line; the process fails if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use mil_core::baselines::{brute_force_oracle, mean_std};
use mil_core::bilevel::{
    coordinate_descent, permuted_run, BitDecision, MaskCache, MaskEvaluator, OuterConfig, StubLossTable,
    TrainingEvaluator,
};
use mil_core::datasets::{DemoDataset, NormStats, Role, StepBatch, Trajectory};
use mil_core::diffnet::{mean_l2_loss_and_grad, Activation, Layer, LayerSpec, NetParams, Parameters};
use mil_core::dynamics::{
    aug_loss_term, aug_validation_loss, augment_validation, fit_dynamics, state_validation_loss, AugmentedValSets,
    DynamicsConfig, DynamicsParams, DEFAULT_ALPHAS, DEFAULT_COUNT_PER_ALPHA, DEFAULT_T1, DEFAULT_T2,
};
use mil_core::envbench::{EnvSpec, CORRIDOR_TWO_STAGE, DISTRACTOR_REGRESSION, ENV_NAMES, SHIFTED_GOAL_REACH};
use mil_core::experiment::{
    aggregate, run_baselines_seed, run_mil_seed, ExperimentConfig, MetricsRow, MetricsWriter, MilSeedResult, SeedData,
};
use mil_core::gradcheck::{run_suite, GradcheckConfig};
use mil_core::losses::policy_action_loss;
use mil_core::policy::{EncoderKind, FnPolicy, MaskVector, ModalitySchema, PolicyConfig, PolicyParams};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;
const FD_TOLERANCE: f64 = 1e-4;
const RECOVERY_SEEDS: u64 = 10;
const REDUNDANCY_SEEDS: u64 = 5;

struct Check {
    pass: bool,
    detail: String,
}

struct SeedRun {
    data: SeedData,
    mil: MilSeedResult,
}

struct EnvRuns {
    config: ExperimentConfig,
    cache: MaskCache,
    runs: Vec<SeedRun>,
}

impl EnvRuns {
    fn run(env: &str, seeds: u64, overrides: toml::Table) -> EnvRuns {
        let config = ExperimentConfig {
            env: env.into(),
            env_overrides: overrides,
            seeds: (0..seeds).collect(),
            ..Default::default()
        };
        let cache = MaskCache::new();
        let runs = config
            .seeds
            .iter()
            .map(|&s| {
                let data = SeedData::generate(&config, s).expect("data");
                let mil = run_mil_seed(&config, &data, &cache).expect("mil run");
                SeedRun { data, mil }
            })
            .collect();
        EnvRuns { config, cache, runs }
    }

    fn evaluator<'a>(&'a self, run: &'a SeedRun, train_config: &'a mil_core::training::InnerTrainConfig) -> TrainingEvaluator<'a> {
        TrainingEvaluator::new(&run.data.train, &run.mil.bundle, train_config, run.mil.kind, &self.cache).expect("evaluator")
    }

    /// Test metric of a fixed mask, trained exactly as MIL trains it.
    fn fixed_mask_metric(&self, run: &SeedRun, mask: &MaskVector) -> f64 {
        let train_config = self.config.train_for_seed(run.data.seed);
        let e = self.evaluator(run, &train_config).evaluate(mask).expect("evaluate");
        let harness = run.data.harness(&self.config).expect("harness");
        harness.score_masked(e.params.as_ref().unwrap(), mask).expect("score")
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    mil_core::seed::rng(seed)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-2.0..2.0))
}

/// Central differences over every parameter entry, compared with `analytic`.
fn fd_worst<P: Parameters + Clone>(params: &P, analytic: &P, loss: impl Fn(&P) -> f64) -> (usize, f64) {
    let mut probe = params.clone();
    let lens: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut worst = 0.0f64;
    let mut count = 0;
    for (t, &len) in lens.iter().enumerate() {
        for i in 0..len {
            let x = probe.tensors()[t][i];
            probe.tensors_mut()[t][i] = x + FD_STEP;
            let up = loss(&probe);
            probe.tensors_mut()[t][i] = x - FD_STEP;
            let down = loss(&probe);
            probe.tensors_mut()[t][i] = x;
            worst = worst.max(rel_err(analytic.tensors()[t][i], (up - down) / (2.0 * FD_STEP)));
            count += 1;
        }
    }
    (count, worst)
}

fn random_policy(r: &mut ChaCha8Rng, mlp_encoders: bool) -> PolicyParams {
    let m = r.random_range(1..=5);
    let mods: Vec<(String, usize)> = (0..m).map(|i| (format!("m{i}"), r.random_range(1..=3))).collect();
    let schema = ModalitySchema::new(mods, r.random_range(1..=3)).unwrap();
    let config = PolicyConfig {
        encoder: if mlp_encoders {
            EncoderKind::Mlp {
                hidden: r.random_range(1..=5),
            }
        } else {
            EncoderKind::Identity
        },
        head_layers: r.random_range(1..=3),
        head_hidden: r.random_range(2..=8),
    };
    PolicyParams::init(&schema, &config, r.random()).unwrap()
}

fn criterion_1() -> Check {
    let mut r = rng(101);
    let acts = [Activation::Identity, Activation::Tanh, Activation::LeakyRelu];
    let mut worst = 0.0f64;
    let mut entries = 0;
    let mut failed = 0;
    for case in 0..100 {
        let (count, err) = if case % 2 == 0 {
            let depth = r.random_range(1..=3);
            let dims: Vec<usize> = (0..=depth).map(|_| r.random_range(1..=6)).collect();
            let specs: Vec<LayerSpec> = dims
                .windows(2)
                .map(|w| LayerSpec::new(w[0], w[1], acts[r.random_range(0..3)]))
                .collect();
            let net = NetParams::init(&specs, r.random()).unwrap();
            let rows = r.random_range(1..=5);
            let x = random_matrix(&mut r, rows, dims[0]);
            let y = random_matrix(&mut r, rows, dims[depth]);
            let (pred, tape) = net.forward_batch(x.view()).unwrap();
            let (_, g) = mean_l2_loss_and_grad(&pred, y.view()).unwrap();
            let (grads, _) = net.backward(&tape, g.view()).unwrap();
            fd_worst(&net, &grads, |n| mean_l2_loss_and_grad(&n.predict_batch(x.view()).unwrap(), y.view()).unwrap().0)
        } else {
            let mlp = r.random_bool(0.5);
            let p = random_policy(&mut r, mlp);
            let gates: Vec<f64> = (0..p.schema.len()).map(|_| [0.0, 1.0, 0.37][r.random_range(0..3)]).collect();
            let rows = r.random_range(1..=5);
            let batch = StepBatch::new(
                random_matrix(&mut r, rows, p.schema.state_dim()),
                random_matrix(&mut r, rows, p.schema.action_dim()),
            )
            .unwrap();
            let (_, grads, _) = p.loss_and_grads_gated(&gates, &batch).unwrap();
            fd_worst(&p, &grads, |q| q.loss_and_grads_gated(&gates, &batch).unwrap().0)
        };
        entries += count;
        worst = worst.max(err);
        if err >= FD_TOLERANCE {
            failed += 1;
        }
    }
    let library = run_suite(&GradcheckConfig::default()).unwrap();
    Check {
        pass: failed == 0 && library.passed(),
        detail: format!(
            "100 cases, {entries} entries, max rel err {worst:.2e} (< {FD_TOLERANCE:e}), {failed} failing; library suite max {:.2e}",
            library.max_rel_error()
        ),
    }
}

fn criterion_2() -> Check {
    let mut r = rng(202);
    let mut mismatches = 0;
    let mut nonzero_grads = 0;
    for trial in 0..1000 {
        let p = random_policy(&mut r, trial % 2 == 0);
        let m = p.schema.len();
        let mask = MaskVector::from_index(r.random_range(0..(1u64 << m)), m);
        let rows = r.random_range(1..=4);
        let states = random_matrix(&mut r, rows, p.schema.state_dim());
        let mut perturbed = states.clone();
        for (i, range) in p.schema.ranges().into_iter().enumerate() {
            if mask.get(i) == 0 {
                for row in 0..rows {
                    for c in range.clone() {
                        perturbed[[row, c]] = r.random_range(-1e3..1e3);
                    }
                }
            }
        }
        let a = p.predict(&mask, states.view()).unwrap();
        let b = p.predict(&mask, perturbed.view()).unwrap();
        if a.iter().zip(b.iter()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            mismatches += 1;
        }
        let batch = StepBatch::new(states, random_matrix(&mut r, rows, p.schema.action_dim())).unwrap();
        let (_, grads) = p.loss_and_grads(&mask, &batch).unwrap();
        for i in (0..m).filter(|&i| mask.get(i) == 0) {
            if grads.encoders[i].tensors().iter().any(|t| t.iter().any(|&v| v != 0.0)) {
                nonzero_grads += 1;
            }
        }
    }
    Check {
        pass: mismatches == 0 && nonzero_grads == 0,
        detail: format!("1000 trials: {mismatches} output mismatches, {nonzero_grads} masked encoders with nonzero gradient"),
    }
}

fn decision(sweep: usize, bit: usize, mask: &str, l0: f64, l1: f64, chosen: u8) -> (usize, usize, String, f64, f64, u8) {
    (sweep, bit, mask.to_string(), l0, l1, chosen)
}

fn summarize(history: &[BitDecision]) -> Vec<(usize, usize, String, f64, f64, u8)> {
    history
        .iter()
        .map(|d| (d.sweep, d.bit, d.mask.to_string(), d.loss_zero(), d.loss_one(), d.chosen))
        .collect()
}

fn criterion_3() -> Check {
    let stub = StubLossTable::new([("11", 1.0), ("01", 0.2), ("10", 0.5), ("00", 0.9)]).unwrap();
    let forward = coordinate_descent(&stub, &OuterConfig::default()).unwrap();
    let expected = vec![
        decision(0, 0, "01", 0.2, 1.0, 0),
        decision(0, 1, "01", 0.9, 0.2, 1),
        decision(1, 0, "01", 0.2, 1.0, 0),
        decision(1, 1, "01", 0.9, 0.2, 1),
    ];
    let reversed = permuted_run(&stub, &OuterConfig::default(), &[1, 0]).unwrap();
    let expected_rev = vec![
        decision(0, 1, "10", 0.5, 1.0, 0),
        decision(0, 0, "10", 0.9, 0.5, 1),
        decision(1, 1, "10", 0.5, 1.0, 0),
        decision(1, 0, "10", 0.9, 0.5, 1),
    ];
    let pass = forward.mask.to_string() == "01"
        && forward.l_out == 0.2
        && forward.state.converged
        && summarize(&forward.state.history) == expected
        && reversed.mask.to_string() == "10"
        && summarize(&reversed.state.history) == expected_rev;
    Check {
        pass,
        detail: format!(
            "canonical order -> {} in {} sweeps, reversed order -> {}",
            forward.mask, forward.state.sweep_count, reversed.mask
        ),
    }
}

fn criterion_4(distractor: &EnvRuns, reach: &EnvRuns) -> Check {
    let d_env = &distractor.runs[0].data.env;
    let (d_shift, d_inv) = (d_env.shifted_modality(), d_env.invariant_modality());
    let d_ok = distractor
        .runs
        .iter()
        .filter(|r| r.mil.outcome.mask.get(d_shift) == 0 && r.mil.outcome.mask.get(d_inv) == 1)
        .count();
    let r_env = &reach.runs[0].data.env;
    let (target, offset) = (r_env.shifted_modality(), r_env.invariant_modality());
    let copy = r_env.schema().index_of("offset_copy").expect("duplicate modality");
    let r_ok = reach
        .runs
        .iter()
        .filter(|r| {
            let m = &r.mil.outcome.mask;
            m.get(target) == 0 && (m.get(offset) == 1 || m.get(copy) == 1)
        })
        .count();
    let literal = reach
        .runs
        .iter()
        .filter(|r| r.mil.outcome.mask.get(target) == 0 && r.mil.outcome.mask.get(offset) == 1)
        .count();
    let masks = |runs: &EnvRuns| runs.runs.iter().map(|r| r.mil.outcome.mask.to_string()).collect::<Vec<_>>().join(" ");
    Check {
        pass: d_ok >= 9 && r_ok >= 8,
        detail: format!(
            "distractor {d_ok}/10 [{}]; reach {r_ok}/10 keep offset via m1 or its copy m4, {literal}/10 via m1 itself [{}]",
            masks(distractor),
            masks(reach)
        ),
    }
}

fn criterion_5(distractor: &EnvRuns) -> Check {
    let mut within = 0;
    let mut gaps = Vec::new();
    for run in &distractor.runs {
        let train_config = distractor.config.train_for_seed(run.data.seed);
        let ev = distractor.evaluator(run, &train_config);
        let ranked = brute_force_oracle(&ev, false, None).unwrap();
        let best = ranked[0].l_out;
        let gap = (run.mil.outcome.l_out - best) / best.abs();
        if gap <= 0.05 {
            within += 1;
        }
        gaps.push(format!("{gap:.3}"));
    }
    Check {
        pass: within >= 9,
        detail: format!("{within}/10 seeds within 5% of the exhaustive minimum (relative gaps {})", gaps.join(" ")),
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn pooled_std(a: &[f64], b: &[f64]) -> f64 {
    let sa = mean_std(a).1.unwrap_or(0.0);
    let sb = mean_std(b).1.unwrap_or(0.0);
    ((sa * sa + sb * sb) / 2.0).sqrt()
}

fn metric_triplets(runs: &EnvRuns) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut mil = Vec::new();
    let mut bc = Vec::new();
    let mut oracle = Vec::new();
    for run in &runs.runs {
        let m = run.data.env.schema().len();
        mil.push(run.mil.test_metric);
        bc.push(runs.fixed_mask_metric(run, &MaskVector::ones(m)));
        oracle.push(runs.fixed_mask_metric(run, &run.data.env.oracle_mask()));
    }
    (mil, bc, oracle)
}

fn criterion_6(distractor: &EnvRuns, reach: &EnvRuns) -> Check {
    let (d_mil, d_bc, d_or) = metric_triplets(distractor);
    let d_ratio = median(&d_mil) / median(&d_bc);
    let d_gap = mean_std(&d_mil).0 - mean_std(&d_or).0;
    let d_pooled = pooled_std(&d_mil, &d_or);
    let d_noise = d_gap.abs() <= 2.0 * d_pooled;
    let (r_mil, r_bc, r_or) = metric_triplets(reach);
    let gain = median(&r_mil) - median(&r_bc);
    let oracle_gain = median(&r_or) - median(&r_bc);
    let r_gap = mean_std(&r_mil).0 - mean_std(&r_or).0;
    let r_pooled = pooled_std(&r_mil, &r_or);
    let r_noise = r_gap.abs() <= 2.0 * r_pooled;
    Check {
        pass: d_ratio <= 0.5 && d_noise && gain >= 0.5 * oracle_gain && r_noise,
        detail: format!(
            "distractor median mse MIL {:.3e} / BC {:.3e} = {d_ratio:.2e}, oracle {:.3e}, mean MIL - oracle {d_gap:.3e} vs 2 pooled std {:.3e} ({d_noise}); \
             reach median return MIL {:.3} BC {:.3} oracle {:.3} (gain {gain:.3} vs oracle gain {oracle_gain:.3}), mean MIL - oracle {r_gap:.3} vs 2 pooled std {:.3} ({r_noise})",
            median(&d_mil),
            median(&d_bc),
            median(&d_or),
            2.0 * d_pooled,
            median(&r_mil),
            median(&r_bc),
            median(&r_or),
            2.0 * r_pooled
        ),
    }
}

fn criterion_7() -> Check {
    let env = EnvSpec::by_name(CORRIDOR_TWO_STAGE).unwrap();
    let train_raw = env.generate_demos(Role::Train, 100, 7).unwrap();
    let val_raw = env.generate_demos(Role::Val, 10, 7).unwrap();
    let stats = NormStats::compute(&train_raw).unwrap();
    let train = train_raw.normalized(&stats).unwrap();
    let val = val_raw.normalized(&stats).unwrap();
    let fit = fit_dynamics(&train.merge(&val).unwrap(), &DynamicsConfig::default(), 7).unwrap();
    let horizon = env.horizon() as f64;
    // Blue: a small constant bias whose effect accumulates. Red: a larger
    // perturbation whose sign alternates every step.
    let blue = FnPolicy::new(1, |s: &[f64]| {
        let raw = stats.denormalize(s);
        vec![env.expert_action(&raw).unwrap()[0] - 0.02]
    });
    let red = FnPolicy::new(1, |s: &[f64]| {
        let raw = stats.denormalize(s);
        let step = (raw[3] * horizon).round() as i64;
        let sign = if step % 2 == 0 { 1.0 } else { -1.0 };
        vec![env.expert_action(&raw).unwrap()[0] + 0.05 * sign]
    });
    let act_blue = policy_action_loss(&blue, &val).unwrap().value;
    let act_red = policy_action_loss(&red, &val).unwrap().value;
    let st_blue = state_validation_loss(&fit.model, &blue, &val).unwrap().value;
    let st_red = state_validation_loss(&fit.model, &red, &val).unwrap().value;
    Check {
        pass: fit.final_loss < 1e-4 && act_blue < act_red && st_red < st_blue,
        detail: format!(
            "dynamics loss {:.2e}; action loss blue {act_blue:.3e} < red {act_red:.3e}; state loss red {st_red:.3e} < blue {st_blue:.3e}",
            fit.final_loss
        ),
    }
}

/// Exact model of `s' = s + a` in one dimension.
fn integrator() -> DynamicsParams {
    let layer = Layer {
        weight: Array2::from_shape_vec((1, 2), vec![1.0, 1.0]).unwrap(),
        bias: Array1::zeros(1),
        activation: Activation::Identity,
    };
    DynamicsParams::new(NetParams::from_layers(vec![layer]).unwrap(), 1, 1).unwrap()
}

fn one_d(role: Role, trajs: Vec<Vec<f64>>) -> DemoDataset {
    let schema = ModalitySchema::new([("x", 1)], 1).unwrap();
    let trajectories = trajs
        .into_iter()
        .map(|xs| Trajectory::new(xs.iter().map(|&x| vec![x]).collect(), vec![vec![0.0]; xs.len()]))
        .collect();
    let mut ds = DemoDataset::new(schema, role, trajectories).unwrap();
    ds.normalization = Some("unit".into());
    ds
}

fn criterion_8() -> Check {
    let term = aug_loss_term(0.2, 0.5, 0.2, 1.0);
    let val = one_d(Role::Val, vec![vec![0.0, 0.0, 0.0]]);
    let sets = AugmentedValSets {
        success: one_d(Role::Augmented, vec![vec![0.0, 0.1, 0.3]]),
        failure: one_d(Role::Augmented, vec![vec![0.0, 0.5, 1.0]]),
    };
    let policy = FnPolicy::new(1, |_s: &[f64]| vec![0.1]);
    let full = aug_validation_loss(&integrator(), &policy, &val, &sets, DEFAULT_T1, DEFAULT_T2).unwrap();
    let env = EnvSpec::by_name(CORRIDOR_TWO_STAGE).unwrap();
    let val20 = env.generate_demos(Role::Val, 20, 3).unwrap();
    let aug = augment_validation(&env, &val20, &DEFAULT_ALPHAS, DEFAULT_COUNT_PER_ALPHA, 3).unwrap();
    let pass = (term - 1.06956).abs() < 1e-4
        && (full - -0.2887988416786913).abs() < 1e-4
        && DEFAULT_T1 == 0.2
        && DEFAULT_T2 == 1.0
        && aug.len() == 60;
    Check {
        pass,
        detail: format!(
            "term(0.2, 0.5) = {term:.5}; rollout case {full:.6}; t1 = {DEFAULT_T1}, t2 = {DEFAULT_T2}; {} augmented from 20 validation trajectories ({} successes, {} failures)",
            aug.len(),
            aug.success.len(),
            aug.failure.len()
        ),
    }
}

fn criterion_9(reach: &EnvRuns) -> Check {
    let mut overrides = toml::Table::new();
    overrides.insert("include_duplicate".into(), toml::Value::Boolean(false));
    let without = EnvRuns::run(SHIFTED_GOAL_REACH, REDUNDANCY_SEEDS, overrides);
    let with: Vec<f64> = reach.runs[..REDUNDANCY_SEEDS as usize].iter().map(|r| r.mil.test_metric).collect();
    let wo: Vec<f64> = without.runs.iter().map(|r| r.mil.test_metric).collect();
    let (a, b) = (mean_std(&with).0, mean_std(&wo).0);
    let change = (a - b).abs() / b.abs();
    let masks = without.runs.iter().map(|r| r.mil.outcome.mask.to_string()).collect::<Vec<_>>().join(" ");
    Check {
        pass: change < 0.05,
        detail: format!("mean test return with duplicate {a:.4}, without {b:.4} [{masks}]; relative change {change:.4}"),
    }
}

fn metrics_bytes(config: &ExperimentConfig) -> Vec<u8> {
    let cache = MaskCache::new();
    let mut w = MetricsWriter::new(Vec::new(), "acceptance", config).unwrap();
    let mut scores = Vec::new();
    let mut metric = None;
    for &s in &config.seeds {
        let data = SeedData::generate(config, s).unwrap();
        let mil = run_mil_seed(config, &data, &cache).unwrap();
        metric = Some(mil.metric);
        for row in MetricsRow::mil_rows(&data.env, &mil) {
            w.write(&row).unwrap();
        }
        for score in run_baselines_seed(config, &data, &cache).unwrap() {
            w.write(&MetricsRow::method(&config.env, mil.metric, &score)).unwrap();
            scores.push(score);
        }
    }
    for agg in aggregate(&scores, metric.unwrap()).unwrap() {
        w.write(&MetricsRow::aggregate(&config.env, &agg)).unwrap();
    }
    w.into_inner().unwrap()
}

fn round_trip_property() -> std::result::Result<(), String> {
    use proptest::prelude::*;
    use proptest::test_runner::{Config, TestRunner};
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("ds.jsonl");
    let mut runner = TestRunner::new(Config::with_cases(50));
    let strategy = (0..ENV_NAMES.len(), any::<u64>(), 1..6usize, 0..4usize, any::<bool>());
    runner
        .run(&strategy, |(env_index, seed_value, n, role_index, normalize)| {
            let env = EnvSpec::by_name(ENV_NAMES[env_index]).unwrap();
            let mut ds = if role_index == 3 {
                let val = env.generate_demos(Role::Val, n, seed_value).unwrap();
                augment_validation(&env, &val, &DEFAULT_ALPHAS, 1, seed_value).unwrap().combined().unwrap()
            } else {
                env.generate_demos([Role::Train, Role::Val, Role::Test][role_index], n, seed_value).unwrap()
            };
            if normalize {
                ds = ds.normalized(&NormStats::compute(&ds).unwrap()).unwrap();
            }
            ds.save(&path).unwrap();
            let back = DemoDataset::load(&path).unwrap();
            prop_assert_eq!(back.fingerprint(), ds.fingerprint());
            prop_assert_eq!(back, ds);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn criterion_10() -> Check {
    let mut config = ExperimentConfig {
        env: DISTRACTOR_REGRESSION.into(),
        n_train: 20,
        n_val: 5,
        n_test: 10,
        seeds: vec![0, 1],
        k_masks: 2,
        test_episodes: 5,
        ..Default::default()
    };
    config.train.max_epochs = 40;
    config.train.policy.head_hidden = 8;
    let a = metrics_bytes(&config);
    let b = metrics_bytes(&config);
    let mut reach = config.clone();
    reach.env = SHIFTED_GOAL_REACH.into();
    reach.dynamics.train.max_epochs = 200;
    let c = metrics_bytes(&reach);
    let d = metrics_bytes(&reach);
    let round_trip = round_trip_property();
    Check {
        pass: a == b && c == d && round_trip.is_ok(),
        detail: format!(
            "distractor csv {} bytes identical {}, reach csv {} bytes identical {}; 50-dataset round trip {}",
            a.len(),
            a == b,
            c.len(),
            c == d,
            round_trip.err().unwrap_or_else(|| "passed".into())
        ),
    }
}

fn main() -> ExitCode {
    let mut all_pass = true;
    let mut report = |id: u32, title: &str, limit_s: Option<f64>, start: Instant, check: Check| {
        let secs = start.elapsed().as_secs_f64();
        let in_time = limit_s.is_none_or(|l| secs < l);
        let pass = check.pass && in_time;
        all_pass &= pass;
        let limit = limit_s.map(|l| format!(", limit {l:.0}s")).unwrap_or_default();
        println!(
            "criterion {id:>2} {} {title}: {} [{secs:.1}s{limit}]",
            if pass { "PASS" } else { "FAIL" },
            check.detail
        );
    };

    let t = Instant::now();
    report(1, "gradient correctness", Some(30.0), t, criterion_1());
    let t = Instant::now();
    report(2, "masked invariance", None, t, criterion_2());
    let t = Instant::now();
    report(3, "coordinate descent trace", Some(1.0), t, criterion_3());

    let t = Instant::now();
    let distractor = EnvRuns::run(DISTRACTOR_REGRESSION, RECOVERY_SEEDS, toml::Table::new());
    let reach = EnvRuns::run(SHIFTED_GOAL_REACH, RECOVERY_SEEDS, toml::Table::new());
    report(4, "mask recovery", Some(600.0), t, criterion_4(&distractor, &reach));
    let t = Instant::now();
    report(5, "exhaustive oracle agreement", Some(900.0), t, criterion_5(&distractor));
    let t = Instant::now();
    report(6, "generalization gap", None, t, criterion_6(&distractor, &reach));
    let t = Instant::now();
    report(7, "compounding error scenario", None, t, criterion_7());
    let t = Instant::now();
    report(8, "success/failure loss", None, t, criterion_8());
    let t = Instant::now();
    report(9, "redundancy tolerance", None, t, criterion_9(&reach));
    let t = Instant::now();
    report(10, "determinism and persistence", None, t, criterion_10());

    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
