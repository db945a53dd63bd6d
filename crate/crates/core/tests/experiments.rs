//! Desk-scale experiments on the distractor environment: the over-specification
//! effect, the oracle and continuous-mask baselines, ordering stability and
//! cache reuse.

use mil_core::baselines::{mean_std, train_continuous_mask, TestHarness, FIXED_WEIGHT_SWEEP};
use mil_core::bilevel::{permuted_run, LossKind, MaskCache, MaskEvaluator, TrainingEvaluator, ValBundle};
use mil_core::envbench::DISTRACTOR_REGRESSION;
use mil_core::experiment::{build_bundle, ExperimentConfig, SeedData};
use mil_core::losses::policy_action_loss;
use mil_core::policy::{MaskVector, MaskedPolicy};

fn distractor() -> ExperimentConfig {
    ExperimentConfig {
        env: DISTRACTOR_REGRESSION.into(),
        test_episodes: 10,
        ..Default::default()
    }
}

struct Seed {
    data: SeedData,
    bundle: ValBundle,
    harness: TestHarness,
}

fn seed(config: &ExperimentConfig, s: u64) -> Seed {
    let data = SeedData::generate(config, s).unwrap();
    let (bundle, _) = build_bundle(config, &data, LossKind::Action).unwrap();
    let harness = data.harness(config).unwrap();
    Seed { data, bundle, harness }
}

fn test_mse(config: &ExperimentConfig, s: &Seed, cache: &MaskCache, mask: &MaskVector) -> (f64, f64) {
    let train = config.train_for_seed(s.data.seed);
    let ev = TrainingEvaluator::new(&s.data.train, &s.bundle, &train, LossKind::Action, cache).unwrap();
    let e = ev.evaluate(mask).unwrap();
    let params = e.params.unwrap();
    (s.harness.score_masked(&params, mask).unwrap(), e.l_out)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    for (rank, &i) in idx.iter().enumerate() {
        r[i] = rank as f64;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

#[test]
fn shifted_copy_breaks_bc_and_oracle_fixes_it() {
    let config = distractor();
    let cache = MaskCache::new();
    for s in 0..3 {
        let sd = seed(&config, s);
        let ones = MaskVector::ones(4);
        let oracle = sd.data.env.oracle_mask();
        let (bc_test, bc_val) = test_mse(&config, &sd, &cache, &ones);
        let (oracle_test, oracle_val) = test_mse(&config, &sd, &cache, &oracle);

        let train = config.train_for_seed(s);
        let ev = TrainingEvaluator::new(&sd.data.train, &sd.bundle, &train, LossKind::Action, &cache).unwrap();
        let bc = ev.evaluate(&ones).unwrap().params.unwrap();
        let bc_train = policy_action_loss(&MaskedPolicy::new(&bc, &ones), &sd.data.train).unwrap().value;

        assert!(bc_test >= 10.0 * bc_train, "seed {s}: test {bc_test} vs train {bc_train}");
        assert!(oracle_test < 0.1 * bc_test, "seed {s}: oracle {oracle_test} vs bc {bc_test}");
        assert!(oracle_val < bc_val, "seed {s}: validation {oracle_val} vs {bc_val}");
    }
}

#[test]
fn without_a_shift_bc_matches_the_oracle() {
    let mut config = distractor();
    config.env_overrides = toml::from_str("shifted_bias = [2.0, 2.0]").unwrap();
    let cache = MaskCache::new();
    let (mut bc, mut oracle) = (Vec::new(), Vec::new());
    for s in 0..5 {
        let sd = seed(&config, s);
        bc.push(test_mse(&config, &sd, &cache, &MaskVector::ones(4)).0);
        oracle.push(test_mse(&config, &sd, &cache, &sd.data.env.oracle_mask()).0);
    }
    let (mb, sb) = mean_std(&bc);
    let (mo, so) = mean_std(&oracle);
    let pooled = ((sb.unwrap().powi(2) + so.unwrap().powi(2)) / 2.0).sqrt();
    assert!((mb - mo).abs() <= 2.0 * pooled, "bc {bc:?} oracle {oracle:?}");
}

#[test]
fn larger_fixed_weight_on_the_shifted_copy_hurts_more() {
    let config = distractor();
    let mut mse = Vec::new();
    for &w in &FIXED_WEIGHT_SWEEP {
        let mut per_seed = Vec::new();
        for s in 0..3 {
            let sd = seed(&config, s);
            let weights = [1.0, w, 1.0, 1.0];
            let (policy, gates) = train_continuous_mask(&sd.data.train, &config.train_for_seed(s), s, Some(&weights)).unwrap();
            per_seed.push(sd.harness.score(&MaskedPolicy::with_gates(&policy.params, gates)).unwrap());
        }
        mse.push(mean_std(&per_seed).0);
    }
    let rho = spearman(&FIXED_WEIGHT_SWEEP, &mse);
    assert!(rho >= 0.8, "mse by weight {mse:?}, rank correlation {rho}");
}

#[test]
fn every_visiting_order_keeps_the_signal() {
    let config = distractor();
    let sd = seed(&config, 1);
    let cache = MaskCache::new();
    let train = config.train_for_seed(1);
    let ev = TrainingEvaluator::new(&sd.data.train, &sd.bundle, &train, LossKind::Action, &cache).unwrap();
    let signal = sd.data.env.invariant_modality();
    let mut orders = vec![Vec::new()];
    for _ in 0..4 {
        orders = orders
            .into_iter()
            .flat_map(|o: Vec<usize>| {
                let used = o.clone();
                (0..4).filter(move |i| !used.contains(i)).map(move |i| {
                    let mut next = o.clone();
                    next.push(i);
                    next
                })
            })
            .collect();
    }
    assert_eq!(orders.len(), 24);
    for order in &orders {
        let out = permuted_run(&ev, &config.outer, order).unwrap();
        assert_eq!(out.mask.get(signal), 1, "order {order:?} gave {}", out.mask);
    }
    assert!(cache.len() <= 16);
}

#[test]
fn disk_cache_is_reused_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = distractor();
    config.n_train = 20;
    config.train.max_epochs = 50;
    let sd = seed(&config, 0);
    let train = config.train_for_seed(0);
    let mask: MaskVector = "1011".parse().unwrap();

    let first_cache = MaskCache::with_dir(dir.path()).unwrap();
    let first = TrainingEvaluator::new(&sd.data.train, &sd.bundle, &train, LossKind::Action, &first_cache)
        .unwrap()
        .evaluate(&mask)
        .unwrap();
    assert!(!first.cache_hit && first.epochs_trained > 0);

    let second_cache = MaskCache::with_dir(dir.path()).unwrap();
    let second = TrainingEvaluator::new(&sd.data.train, &sd.bundle, &train, LossKind::Action, &second_cache)
        .unwrap()
        .evaluate(&mask)
        .unwrap();
    assert!(second.cache_hit);
    assert_eq!(second.epochs_trained, 0);
    assert_eq!(second.epochs, first.epochs);
    assert_eq!(second.l_out.to_bits(), first.l_out.to_bits());
    assert_eq!(second.params, first.params);

    let mut other = train.clone();
    other.seed_base = 1;
    let fresh = TrainingEvaluator::new(&sd.data.train, &sd.bundle, &other, LossKind::Action, &second_cache)
        .unwrap()
        .evaluate(&mask)
        .unwrap();
    assert!(!fresh.cache_hit, "a different seed is a different cache key");
}
