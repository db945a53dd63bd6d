//! Experiment configuration, per-seed MIL and baseline runs, and the metrics
//! CSV and mask report files every front end writes.

use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{
    mask_average, select_mask_post_hoc, train_continuous_mask, train_mask_dropout, BaselineResult, RankedMask,
    RunScore, Selector, TestHarness, TestMetric,
};
use crate::bilevel::{
    permuted_run, BitDecision, LossKind, MaskCache, MaskEvaluation, MaskEvaluator, MilOutcome, OnlineValidation,
    OuterConfig, TrainingEvaluator, ValBundle,
};
use crate::datasets::{DemoDataset, NormStats, Role};
use crate::dynamics::{augment_validation, fit_dynamics, AugmentedValSets, DynamicsConfig, DEFAULT_ALPHAS, DEFAULT_T1, DEFAULT_T2};
use crate::envbench::{EnvSpec, CORRIDOR_TWO_STAGE, DISTRACTOR_REGRESSION, SHIFTED_GOAL_REACH};
use crate::error::{usage_err, MilError, Result};
use crate::policy::{MaskVector, ModalitySchema, PolicyParams};
use crate::seed;
use crate::training::InnerTrainConfig;

pub const METRICS_FORMAT: &str = "mil-metrics/1";
pub const MASK_REPORT_FORMAT: &str = "mil-mask-report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: String,
    /// Environment parameters replacing the registry defaults.
    pub env_overrides: toml::Table,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub train: InnerTrainConfig,
    /// Outer loss; unset picks the environment's default.
    pub loss_kind: Option<LossKind>,
    pub outer: OuterConfig,
    pub t1: f64,
    pub t2: f64,
    pub alphas: Vec<f64>,
    pub aug_count_per_alpha: usize,
    pub k_masks: usize,
    pub p_drop: f64,
    pub seeds: Vec<u64>,
    /// Order in which coordinate descent visits modalities, by name.
    pub modality_order: Option<Vec<String>>,
    pub dynamics: DynamicsConfig,
    pub test_episodes: usize,
    pub online_val_episodes: usize,
    /// Baselines train on train and validation demonstrations together.
    pub train_on_all: bool,
    pub disable_cache: bool,
    /// Adds MIL with the online outer loss to the baseline suite.
    pub online_eval: bool,
    /// Records wall-clock times; otherwise they are written as 0.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: SHIFTED_GOAL_REACH.into(),
            env_overrides: toml::Table::new(),
            n_train: 100,
            n_val: 10,
            n_test: 50,
            train: InnerTrainConfig::default(),
            loss_kind: None,
            outer: OuterConfig::default(),
            t1: DEFAULT_T1,
            t2: DEFAULT_T2,
            alphas: DEFAULT_ALPHAS.to_vec(),
            aug_count_per_alpha: 2,
            k_masks: crate::baselines::DEFAULT_K_MASKS,
            p_drop: crate::baselines::DEFAULT_P_DROP,
            seeds: (0..5).collect(),
            modality_order: None,
            dynamics: DynamicsConfig::default(),
            test_episodes: 50,
            online_val_episodes: 10,
            train_on_all: false,
            disable_cache: false,
            online_eval: false,
            timing: false,
        }
    }
}

/// Outer loss used when the configuration leaves it unset.
pub fn default_loss_kind(env_name: &str) -> LossKind {
    match env_name {
        DISTRACTOR_REGRESSION => LossKind::Action,
        SHIFTED_GOAL_REACH | CORRIDOR_TWO_STAGE => LossKind::State,
        _ => LossKind::Action,
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| usage_err!("config: {e}"))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MilError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Single-line JSON form embedded in output files.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        EnvSpec::with_overrides(&self.env, &self.env_overrides)
    }

    pub fn resolved_loss_kind(&self) -> LossKind {
        self.loss_kind.unwrap_or_else(|| default_loss_kind(&self.env))
    }

    pub fn validate(&self) -> Result<()> {
        let env = self.env_spec()?;
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(usage_err!("dataset sizes must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(usage_err!("seeds must not be empty"));
        }
        self.train.validate()?;
        self.dynamics.train.validate()?;
        if !(self.t1 > 0.0 && self.t2 > 0.0) {
            return Err(usage_err!("t1 and t2 must be positive"));
        }
        if self.alphas.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(usage_err!("alphas must be finite and nonnegative"));
        }
        if self.aug_count_per_alpha == 0 || self.k_masks == 0 {
            return Err(usage_err!("aug_count_per_alpha and k_masks must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(usage_err!("p_drop must lie in [0, 1)"));
        }
        if self.test_episodes == 0 || self.online_val_episodes == 0 {
            return Err(usage_err!("episode counts must be at least 1"));
        }
        self.order_indices(env.schema())?;
        Ok(())
    }

    /// Visiting order as schema indices.
    pub fn order_indices(&self, schema: &ModalitySchema) -> Result<Vec<usize>> {
        let Some(names) = &self.modality_order else {
            return Ok((0..schema.len()).collect());
        };
        let order = names
            .iter()
            .map(|n| schema.index_of(n).ok_or_else(|| usage_err!("unknown modality {n:?} in modality_order")))
            .collect::<Result<Vec<_>>>()?;
        crate::policy::validate_permutation(&order, schema.len())?;
        Ok(order)
    }

    /// Inner training configuration for one seed.
    pub fn train_for_seed(&self, seed_value: u64) -> InnerTrainConfig {
        InnerTrainConfig {
            seed_base: seed_value,
            ..self.train.clone()
        }
    }

    pub fn cache(&self) -> Result<MaskCache> {
        if self.disable_cache {
            Ok(MaskCache::disabled())
        } else {
            MaskCache::from_env()
        }
    }
}

/// Demonstrations for one seed. Raw sets keep simulator units; the others
/// are normalized with statistics of the raw training set.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub seed: u64,
    pub env: EnvSpec,
    pub stats: NormStats,
    pub train_raw: DemoDataset,
    pub val_raw: DemoDataset,
    pub test_raw: DemoDataset,
    pub train: DemoDataset,
    pub val: DemoDataset,
    pub test: DemoDataset,
    pub augmented_raw: Option<AugmentedValSets>,
}

impl SeedData {
    pub fn generate(config: &ExperimentConfig, seed_value: u64) -> Result<Self> {
        let env = config.env_spec()?;
        let train = env.generate_demos(Role::Train, config.n_train, seed_value)?;
        let val = env.generate_demos(Role::Val, config.n_val, seed_value)?;
        let test = env.generate_demos(Role::Test, config.n_test, seed_value)?;
        Self::from_raw(env, seed_value, train, val, test, None)
    }

    pub fn from_raw(
        env: EnvSpec,
        seed_value: u64,
        train_raw: DemoDataset,
        val_raw: DemoDataset,
        test_raw: DemoDataset,
        augmented_raw: Option<AugmentedValSets>,
    ) -> Result<Self> {
        for ds in [&train_raw, &val_raw, &test_raw] {
            if &ds.schema != env.schema() {
                return Err(MilError::Schema(format!("{} data does not match the {} schema", ds.role, env.name())));
            }
        }
        let stats = NormStats::compute(&train_raw)?;
        Ok(Self {
            seed: seed_value,
            train: train_raw.normalized(&stats)?,
            val: val_raw.normalized(&stats)?,
            test: test_raw.normalized(&stats)?,
            env,
            stats,
            train_raw,
            val_raw,
            test_raw,
            augmented_raw,
        })
    }

    pub fn harness(&self, config: &ExperimentConfig) -> Result<TestHarness> {
        TestHarness::new(
            self.env.clone(),
            self.test.clone(),
            self.stats.clone(),
            config.test_episodes,
            seed::derive_str(self.seed, "test-episodes"),
        )
    }

    /// Noise-augmented validation trajectories, generated on first use.
    pub fn augmented(&self, config: &ExperimentConfig) -> Result<AugmentedValSets> {
        match &self.augmented_raw {
            Some(a) => Ok(a.clone()),
            None => augment_validation(&self.env, &self.val_raw, &config.alphas, config.aug_count_per_alpha, self.seed),
        }
    }
}

/// Validation bundle for `kind` plus the dynamics fit loss when one was fitted.
pub fn build_bundle(config: &ExperimentConfig, data: &SeedData, kind: LossKind) -> Result<(ValBundle, Option<f64>)> {
    let mut bundle = ValBundle::new(data.val.clone());
    bundle.t1 = config.t1;
    bundle.t2 = config.t2;
    let mut dynamics_loss = None;
    if matches!(kind, LossKind::State | LossKind::Aug) {
        let fit = fit_dynamics(&data.train.merge(&data.val)?, &config.dynamics, data.seed)?;
        dynamics_loss = Some(fit.final_loss);
        bundle.dynamics = Some(fit.model);
    }
    if kind == LossKind::Aug {
        bundle.augmented = Some(data.augmented(config)?.normalized(&data.stats)?);
    }
    if kind == LossKind::Online {
        bundle.online = Some(OnlineValidation {
            env: data.env.clone(),
            stats: data.stats.clone(),
            episodes: config.online_val_episodes,
            seed: seed::derive_str(data.seed, "val-episodes"),
        });
    }
    Ok((bundle, dynamics_loss))
}

/// Records how long each evaluation took, in call order.
struct TimedEvaluator<'a> {
    inner: &'a dyn MaskEvaluator,
    times_ms: Mutex<Vec<f64>>,
}

impl MaskEvaluator for TimedEvaluator<'_> {
    fn num_modalities(&self) -> usize {
        self.inner.num_modalities()
    }

    fn evaluate(&self, mask: &MaskVector) -> Result<MaskEvaluation> {
        let start = Instant::now();
        let out = self.inner.evaluate(mask);
        self.times_ms.lock().expect("timer lock").push(start.elapsed().as_secs_f64() * 1e3);
        out
    }
}

#[derive(Debug, Clone)]
pub struct MilSeedResult {
    pub seed: u64,
    pub kind: LossKind,
    pub outcome: MilOutcome,
    pub metric: TestMetric,
    pub test_metric: f64,
    pub dynamics_loss: Option<f64>,
    pub bundle: ValBundle,
    /// Milliseconds per bit decision (both branches); zeros unless timing.
    pub decision_ms: Vec<f64>,
}

impl MilSeedResult {
    pub fn policy(&self) -> &PolicyParams {
        self.outcome.policy.as_deref().expect("training evaluator keeps parameters")
    }
}

/// Runs coordinate descent for one seed with the configured outer loss.
pub fn run_mil_seed(config: &ExperimentConfig, data: &SeedData, cache: &MaskCache) -> Result<MilSeedResult> {
    run_mil_seed_with(config, data, cache, config.resolved_loss_kind())
}

pub fn run_mil_seed_with(
    config: &ExperimentConfig,
    data: &SeedData,
    cache: &MaskCache,
    kind: LossKind,
) -> Result<MilSeedResult> {
    let (bundle, dynamics_loss) = build_bundle(config, data, kind)?;
    let train_config = config.train_for_seed(data.seed);
    let evaluator = TrainingEvaluator::new(&data.train, &bundle, &train_config, kind, cache)?;
    let timed = TimedEvaluator {
        inner: &evaluator,
        times_ms: Mutex::new(Vec::new()),
    };
    let order = config.order_indices(data.env.schema())?;
    let outcome = permuted_run(&timed, &config.outer, &order)?;
    let times = timed.times_ms.into_inner().expect("timer lock");
    let decision_ms = (0..outcome.state.history.len())
        .map(|i| if config.timing { times[2 * i] + times[2 * i + 1] } else { 0.0 })
        .collect();
    let harness = data.harness(config)?;
    let policy = outcome.policy.as_deref().expect("training evaluator keeps parameters");
    let test_metric = harness.score_masked(policy, &outcome.mask)?;
    Ok(MilSeedResult {
        seed: data.seed,
        kind,
        metric: harness.metric,
        test_metric,
        dynamics_loss,
        decision_ms,
        outcome,
        bundle,
    })
}

/// One (method, seed) score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: String,
    pub seed: u64,
    pub selector: Selector,
    pub test_metric: f64,
    pub val_loss: Option<f64>,
}

/// Every comparison method on one seed. MIL always trains on the training
/// set alone; with `train_on_all` the baselines also see validation data.
pub fn run_baselines_seed(config: &ExperimentConfig, data: &SeedData, cache: &MaskCache) -> Result<Vec<MethodScore>> {
    let kind = config.resolved_loss_kind();
    let harness = data.harness(config)?;
    let mil = run_mil_seed_with(config, data, cache, kind)?;
    let bundle = mil.bundle.clone();
    let train_set = if config.train_on_all {
        let mut all = data.train.merge(&data.val)?;
        all.role = Role::Train;
        all
    } else {
        data.train.clone()
    };
    let train_config = config.train_for_seed(data.seed);
    let evaluator = TrainingEvaluator::new(&train_set, &bundle, &train_config, kind, cache)?;
    let m = data.env.schema().len();
    let mut out = Vec::new();
    let mut push = |method: &str, selector: Selector, test_metric: f64, val_loss: Option<f64>| {
        out.push(MethodScore {
            method: method.into(),
            seed: data.seed,
            selector,
            test_metric,
            val_loss,
        });
    };

    for (method, mask) in [("bc_nomask", MaskVector::ones(m)), ("oracle_mask", data.env.oracle_mask())] {
        let e = evaluator.evaluate(&mask)?;
        let params = e.params.as_ref().expect("training evaluator keeps parameters");
        push(method, Selector::Mask(mask.clone()), harness.score_masked(params, &mask)?, Some(e.l_out));
    }

    let dropout_seed = seed::derive_str(data.seed, "mask-dropout");
    let dropout = train_mask_dropout(&train_set, &train_config, dropout_seed, config.p_drop)?.params;
    let ones = MaskVector::ones(m);
    let dropout_val = bundle.outer_loss(kind, &dropout, &ones)?;
    push("mask_dropout", Selector::Mask(ones.clone()), harness.score_masked(&dropout, &ones)?, Some(dropout_val));
    let (picked, picked_val) = select_mask_post_hoc(&dropout, &bundle, kind)?;
    let picked_score = harness.score_masked(&dropout, &picked)?;
    push("mask_dropout_valid", Selector::Mask(picked), picked_score, Some(picked_val));

    let avg = mask_average(&evaluator, &harness, config.k_masks, data.seed)?;
    let masks = avg
        .runs
        .iter()
        .filter_map(|r| match &r.selector {
            Selector::Mask(mask) => Some(mask.clone()),
            _ => None,
        })
        .collect();
    push("mask_average", Selector::Masks(masks), avg.mean, avg.val_loss);

    let cont_seed = seed::derive_str(data.seed, "continuous-mask");
    let (cont, weights) = train_continuous_mask(&train_set, &train_config, cont_seed, None)?;
    let cont_score = harness.score(&crate::policy::MaskedPolicy::with_gates(&cont.params, weights.clone()))?;
    push("continuous_mask", Selector::Weights(weights), cont_score, None);

    push(
        &format!("mil_{kind}"),
        Selector::Mask(mil.outcome.mask.clone()),
        mil.test_metric,
        Some(mil.outcome.l_out),
    );
    if config.online_eval && kind != LossKind::Online {
        let online = run_mil_seed_with(config, data, cache, LossKind::Online)?;
        push(
            "mil_online",
            Selector::Mask(online.outcome.mask.clone()),
            online.test_metric,
            Some(online.outcome.l_out),
        );
    }
    Ok(out)
}

/// Aggregates (method, seed) scores per method, in first-appearance order.
pub fn aggregate(scores: &[MethodScore], metric: TestMetric) -> Result<Vec<BaselineResult>> {
    let mut methods: Vec<&str> = Vec::new();
    for s in scores {
        if !methods.contains(&s.method.as_str()) {
            methods.push(&s.method);
        }
    }
    methods
        .into_iter()
        .map(|name| {
            let runs = scores
                .iter()
                .filter(|s| s.method == name)
                .map(|s| RunScore {
                    seed: s.seed,
                    selector: s.selector.clone(),
                    test_metric: s.test_metric,
                    val_loss: s.val_loss,
                })
                .collect();
            BaselineResult::from_runs(name, metric, runs)
        })
        .collect()
}

/// One line of the metrics CSV. Unused cells are empty; `row_kind` is one of
/// `decision`, `final`, `method`, `aggregate` or `ranked`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub row_kind: String,
    pub method: String,
    pub env: String,
    pub seed: Option<u64>,
    pub sweep: Option<usize>,
    pub bit: Option<usize>,
    pub modality: Option<String>,
    pub mask_bits: Option<String>,
    pub l_out_0: Option<f64>,
    pub l_out_1: Option<f64>,
    pub chosen: Option<u8>,
    pub inner_epochs_0: Option<usize>,
    pub inner_epochs_1: Option<usize>,
    pub l_out: Option<f64>,
    pub metric_name: Option<String>,
    pub test_metric: Option<f64>,
    pub n: Option<usize>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub wallclock_ms: Option<f64>,
}

impl MetricsRow {
    pub fn decision(env: &str, method: &str, seed_value: u64, names: &[&str], d: &BitDecision, wallclock_ms: f64) -> Self {
        Self {
            row_kind: "decision".into(),
            method: method.into(),
            env: env.into(),
            seed: Some(seed_value),
            sweep: Some(d.sweep),
            bit: Some(d.bit),
            modality: Some(names[d.bit].to_string()),
            mask_bits: Some(d.mask.to_string()),
            l_out_0: Some(d.zero.l_out),
            l_out_1: Some(d.one.l_out),
            chosen: Some(d.chosen),
            inner_epochs_0: Some(d.zero.epochs),
            inner_epochs_1: Some(d.one.epochs),
            wallclock_ms: Some(wallclock_ms),
            ..Default::default()
        }
    }

    pub fn mil_final(env: &str, r: &MilSeedResult) -> Self {
        Self {
            row_kind: "final".into(),
            method: format!("mil_{}", r.kind),
            env: env.into(),
            seed: Some(r.seed),
            sweep: Some(r.outcome.state.sweep_count),
            mask_bits: Some(r.outcome.mask.to_string()),
            l_out: Some(r.outcome.l_out),
            metric_name: Some(r.metric.to_string()),
            test_metric: Some(r.test_metric),
            wallclock_ms: Some(r.decision_ms.iter().sum()),
            ..Default::default()
        }
    }

    /// All decision rows of a MIL run followed by its final row.
    pub fn mil_rows(env: &EnvSpec, r: &MilSeedResult) -> Vec<Self> {
        let names = env.schema().names();
        let method = format!("mil_{}", r.kind);
        let mut rows: Vec<Self> = r
            .outcome
            .state
            .history
            .iter()
            .zip(&r.decision_ms)
            .map(|(d, &ms)| Self::decision(env.name(), &method, r.seed, &names, d, ms))
            .collect();
        rows.push(Self::mil_final(env.name(), r));
        rows
    }

    pub fn method(env: &str, metric: TestMetric, s: &MethodScore) -> Self {
        Self {
            row_kind: "method".into(),
            method: s.method.clone(),
            env: env.into(),
            seed: Some(s.seed),
            mask_bits: Some(s.selector.to_string()),
            l_out: s.val_loss,
            metric_name: Some(metric.to_string()),
            test_metric: Some(s.test_metric),
            ..Default::default()
        }
    }

    pub fn aggregate(env: &str, r: &BaselineResult) -> Self {
        Self {
            row_kind: "aggregate".into(),
            method: r.method.clone(),
            env: env.into(),
            mask_bits: r.selector().map(Selector::to_string),
            l_out: r.val_loss,
            metric_name: Some(r.metric.to_string()),
            n: Some(r.runs.len()),
            mean: Some(r.mean),
            std: r.std,
            ..Default::default()
        }
    }

    pub fn ranked(env: &str, seed_value: u64, rank: usize, metric: TestMetric, r: &RankedMask) -> Self {
        Self {
            row_kind: "ranked".into(),
            method: "brute_force".into(),
            env: env.into(),
            seed: Some(seed_value),
            n: Some(rank),
            mask_bits: Some(r.mask.to_string()),
            l_out: Some(r.l_out),
            metric_name: r.test_metric.map(|_| metric.to_string()),
            test_metric: r.test_metric,
            ..Default::default()
        }
    }
}

/// Streams a metrics CSV: comment lines carrying the format, build id and
/// resolved configuration, then a header row and one record per row.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W, build_id: &str, config: &ExperimentConfig) -> Result<Self> {
        let header = format!("# format: {METRICS_FORMAT}\n# build: {build_id}\n# config: {}\n", config.to_json());
        out.write_all(header.as_bytes()).map_err(|e| MilError::io("metrics output", e))?;
        Ok(Self {
            inner: csv::Writer::from_writer(out),
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row).map_err(|e| csv_err(&e))?;
        self.inner.flush().map_err(|e| MilError::io("metrics output", e))
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner.into_inner().map_err(|e| MilError::io("metrics output", e.into_error()))
    }
}

fn csv_err(e: &csv::Error) -> MilError {
    MilError::Serde(format!("metrics csv: {e}"))
}

/// Header comments and rows of a metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsFile {
    pub build_id: String,
    pub config_json: String,
    pub rows: Vec<MetricsRow>,
}

pub fn read_metrics(text: &str) -> Result<MetricsFile> {
    let mut build_id = None;
    let mut config_json = None;
    let mut format = None;
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        let body = line.trim_start_matches('#').trim();
        if let Some(v) = body.strip_prefix("format:") {
            format = Some(v.trim().to_string());
        } else if let Some(v) = body.strip_prefix("build:") {
            build_id = Some(v.trim().to_string());
        } else if let Some(v) = body.strip_prefix("config:") {
            config_json = Some(v.trim().to_string());
        }
    }
    match format.as_deref() {
        Some(METRICS_FORMAT) => {}
        Some(other) => return Err(usage_err!("unsupported metrics format {other:?}")),
        None => return Err(usage_err!("missing metrics format header")),
    }
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let rows = reader
        .deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| MilError::Parse {
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<MetricsRow>>>()?;
    Ok(MetricsFile {
        build_id: build_id.unwrap_or_default(),
        config_json: config_json.unwrap_or_default(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportModality {
    pub name: String,
    pub bit: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportStep {
    pub sweep: usize,
    pub bit: usize,
    pub modality: String,
    pub l_out_0: f64,
    pub l_out_1: f64,
    pub chosen: u8,
    pub mask_after: MaskVector,
}

/// Final mask of one run with the decision history, modality names in
/// schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub format: String,
    pub build: String,
    pub env: String,
    pub seed: u64,
    pub loss_kind: LossKind,
    pub modalities: Vec<ReportModality>,
    pub mask: MaskVector,
    pub l_out: f64,
    pub sweeps: usize,
    pub converged: bool,
    pub test_metric_name: TestMetric,
    pub test_metric: f64,
    pub history: Vec<ReportStep>,
    pub config: ExperimentConfig,
}

impl MaskReport {
    pub fn new(build_id: &str, config: &ExperimentConfig, env: &EnvSpec, r: &MilSeedResult) -> Self {
        let names = env.schema().names();
        let state = &r.outcome.state;
        Self {
            format: MASK_REPORT_FORMAT.into(),
            build: build_id.into(),
            env: env.name().into(),
            seed: r.seed,
            loss_kind: r.kind,
            modalities: names
                .iter()
                .enumerate()
                .map(|(i, n)| ReportModality {
                    name: n.to_string(),
                    bit: r.outcome.mask.get(i),
                })
                .collect(),
            mask: r.outcome.mask.clone(),
            l_out: r.outcome.l_out,
            sweeps: state.sweep_count,
            converged: state.converged,
            test_metric_name: r.metric,
            test_metric: r.test_metric,
            history: state
                .history
                .iter()
                .map(|d| ReportStep {
                    sweep: d.sweep,
                    bit: d.bit,
                    modality: names[d.bit].to_string(),
                    l_out_0: d.zero.l_out,
                    l_out_1: d.one.l_out,
                    chosen: d.chosen,
                    mask_after: d.mask.clone(),
                })
                .collect(),
            config: config.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
