//! Cyclic coordinate descent over mask bits. Each bit is decided by training
//! a fresh policy under both settings of that bit and keeping the setting
//! with the strictly lower outer loss (ties keep the bit on).

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{hex, DemoDataset, NormStats, Role};
use crate::dynamics::{aug_validation_loss, state_validation_loss, AugmentedValSets, DynamicsParams, DEFAULT_T1, DEFAULT_T2};
use crate::envbench::EnvSpec;
use crate::error::{usage_err, MilError, Result};
use crate::losses::action_validation_loss;
use crate::policy::{validate_permutation, MaskVector, MaskedPolicy, PolicyParams};
use crate::seed;
use crate::training::{fit, InnerTrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Action,
    State,
    Aug,
    Online,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Action => "action",
            LossKind::State => "state",
            LossKind::Aug => "aug",
            LossKind::Online => "online",
        })
    }
}

impl FromStr for LossKind {
    type Err = MilError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "action" => Ok(LossKind::Action),
            "state" => Ok(LossKind::State),
            "aug" => Ok(LossKind::Aug),
            "online" => Ok(LossKind::Online),
            other => Err(usage_err!("unknown loss kind {other:?}; expected action, state, aug or online")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedPolicy {
    pub params: PolicyParams,
    pub final_train_loss: f64,
    pub epochs: usize,
}

/// Seed for training under `mask`; every occurrence of a mask trains the same way.
pub fn branch_seed(seed_base: u64, mask: &MaskVector) -> u64 {
    seed_base ^ seed::derive_str(0, &mask.to_string())
}

/// Fits a freshly initialized policy under `mask` on (normalized) `train`.
pub fn train_inner(mask: &MaskVector, train: &DemoDataset, config: &InnerTrainConfig, seed_value: u64) -> Result<TrainedPolicy> {
    if mask.len() != train.schema.len() {
        return Err(usage_err!("mask has {} bits, schema has {} modalities", mask.len(), train.schema.len()));
    }
    let init = PolicyParams::init(&train.schema, &config.policy, seed_value)?
        .with_stats_fingerprint(train.normalization.clone());
    let batch = train.step_batch();
    let gates = mask.gates();
    let out = fit(init, &batch, config, seed::derive_str(seed_value, "shuffle"), |p, b| {
        let (loss, grads, _) = p.loss_and_grads_gated(&gates, b)?;
        Ok((loss, grads))
    })?;
    Ok(TrainedPolicy {
        params: out.params,
        final_train_loss: out.best_loss,
        epochs: out.epochs,
    })
}

/// Simulator access for the online outer loss.
#[derive(Debug, Clone)]
pub struct OnlineValidation {
    pub env: EnvSpec,
    pub stats: NormStats,
    pub episodes: usize,
    pub seed: u64,
}

/// Everything an outer loss may need beyond the trained policy. All data is
/// normalized with the training statistics.
#[derive(Debug, Clone)]
pub struct ValBundle {
    pub val: DemoDataset,
    pub dynamics: Option<DynamicsParams>,
    pub augmented: Option<AugmentedValSets>,
    pub online: Option<OnlineValidation>,
    pub t1: f64,
    pub t2: f64,
}

impl ValBundle {
    pub fn new(val: DemoDataset) -> Self {
        Self {
            val,
            dynamics: None,
            augmented: None,
            online: None,
            t1: DEFAULT_T1,
            t2: DEFAULT_T2,
        }
    }

    pub fn check(&self, kind: LossKind) -> Result<()> {
        match kind {
            LossKind::Action => Ok(()),
            LossKind::State if self.dynamics.is_none() => Err(usage_err!("state loss needs a fitted dynamics model")),
            LossKind::Aug if self.dynamics.is_none() || self.augmented.is_none() => {
                Err(usage_err!("aug loss needs a fitted dynamics model and augmented trajectories"))
            }
            LossKind::Online if self.online.is_none() => Err(usage_err!("online loss needs a simulator")),
            _ => Ok(()),
        }
    }

    /// Outer loss of a trained policy under `mask`; lower is better for every kind.
    pub fn outer_loss(&self, kind: LossKind, params: &PolicyParams, mask: &MaskVector) -> Result<f64> {
        self.check(kind)?;
        let policy = MaskedPolicy::new(params, mask);
        match kind {
            LossKind::Action => Ok(action_validation_loss(params, mask, &self.val)?.value),
            LossKind::State => Ok(state_validation_loss(self.dynamics.as_ref().expect("checked"), &policy, &self.val)?.value),
            LossKind::Aug => aug_validation_loss(
                self.dynamics.as_ref().expect("checked"),
                &policy,
                &self.val,
                self.augmented.as_ref().expect("checked"),
                self.t1,
                self.t2,
            ),
            LossKind::Online => {
                let o = self.online.as_ref().expect("checked");
                let r = o.env.evaluate_policy_online(Role::Val, &policy, Some(&o.stats), o.episodes, o.seed)?;
                Ok(-r.mean_return)
            }
        }
    }

    /// Content hash of everything that can influence an outer loss.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.val.fingerprint().as_bytes());
        if let Some(d) = &self.dynamics {
            h.update(b"dynamics");
            h.update(serde_json::to_vec(d).expect("dynamics serialize"));
        }
        if let Some(a) = &self.augmented {
            h.update(b"augmented");
            h.update(a.success.fingerprint().as_bytes());
            h.update(a.failure.fingerprint().as_bytes());
        }
        if let Some(o) = &self.online {
            h.update(b"online");
            h.update(serde_json::to_vec(o.env.params()).expect("env serialize"));
            h.update(o.stats.fingerprint().as_bytes());
            h.update(o.episodes.to_le_bytes());
            h.update(o.seed.to_le_bytes());
        }
        h.update(self.t1.to_le_bytes());
        h.update(self.t2.to_le_bytes());
        hex(&h.finalize()[..16])
    }
}

/// Result of scoring one mask.
#[derive(Debug, Clone)]
pub struct MaskEvaluation {
    pub mask: MaskVector,
    pub l_out: f64,
    pub inner_loss: f64,
    /// Epochs spent by the training that produced this result.
    pub epochs: usize,
    /// Epochs spent by this call: zero on a cache hit.
    pub epochs_trained: usize,
    pub cache_hit: bool,
    pub params: Option<Arc<PolicyParams>>,
}

/// Scores masks. The coordinate descent and the exhaustive oracle only talk
/// to this trait, so a fixed loss table can stand in for training.
pub trait MaskEvaluator {
    fn num_modalities(&self) -> usize;
    fn evaluate(&self, mask: &MaskVector) -> Result<MaskEvaluation>;
}

/// Fixed table of outer losses, with no training.
#[derive(Debug, Clone)]
pub struct StubLossTable {
    m: usize,
    table: HashMap<MaskVector, f64>,
}

impl StubLossTable {
    pub fn new<'a>(entries: impl IntoIterator<Item = (&'a str, f64)>) -> Result<Self> {
        let mut table = HashMap::new();
        let mut m = None;
        for (bits, loss) in entries {
            let mask: MaskVector = bits.parse()?;
            if *m.get_or_insert(mask.len()) != mask.len() {
                return Err(usage_err!("stub table mixes mask widths"));
            }
            table.insert(mask, loss);
        }
        let m = m.ok_or_else(|| usage_err!("stub table is empty"))?;
        Ok(Self { m, table })
    }

    /// Every mask of width `m` scores `loss`.
    pub fn constant(m: usize, loss: f64) -> Self {
        Self {
            m,
            table: MaskVector::all(m).map(|k| (k, loss)).collect(),
        }
    }
}

impl MaskEvaluator for StubLossTable {
    fn num_modalities(&self) -> usize {
        self.m
    }

    fn evaluate(&self, mask: &MaskVector) -> Result<MaskEvaluation> {
        let l_out = *self.table.get(mask).ok_or_else(|| usage_err!("stub table has no entry for {mask}"))?;
        Ok(MaskEvaluation {
            mask: mask.clone(),
            l_out,
            inner_loss: 0.0,
            epochs: 0,
            epochs_trained: 0,
            cache_hit: false,
            params: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub mask: MaskVector,
    pub seed: u64,
    pub kind: LossKind,
    pub context: String,
}

impl CacheKey {
    fn file_stem(&self) -> String {
        let text = format!("{}|{}|{}|{}", self.mask, self.seed, self.kind, self.context);
        hex(&Sha256::digest(text.as_bytes())[..16])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheEntry {
    l_out: f64,
    inner_loss: f64,
    epochs: usize,
    params: PolicyParams,
}

/// Memo of trained masks, safe to share across threads. With a directory
/// set, entries are also written to and read from disk.
#[derive(Debug)]
pub struct MaskCache {
    entries: Mutex<HashMap<CacheKey, Arc<CacheEntryShared>>>,
    dir: Option<PathBuf>,
    enabled: bool,
}

#[derive(Debug)]
struct CacheEntryShared {
    l_out: f64,
    inner_loss: f64,
    epochs: usize,
    params: Arc<PolicyParams>,
}

impl Default for MaskCache {
    fn default() -> Self {
        Self::new()
    }
}

/// Environment variable naming an on-disk cache directory.
pub const CACHE_DIR_ENV: &str = "MIL_CACHE_DIR";

impl MaskCache {
    pub fn new() -> Self {
        Self {
            entries: Mutex::default(),
            dir: None,
            enabled: true,
        }
    }

    /// A cache that never stores anything.
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::new()
        }
    }

    pub fn with_dir(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| MilError::io(&dir, e))?;
        Ok(Self {
            dir: Some(dir),
            ..Self::new()
        })
    }

    /// In-memory cache, backed by `$MIL_CACHE_DIR` when that is set.
    pub fn from_env() -> Result<Self> {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(d) if !d.is_empty() => Self::with_dir(PathBuf::from(d)),
            _ => Ok(Self::new()),
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, key: &CacheKey) -> Option<Arc<CacheEntryShared>> {
        if !self.enabled {
            return None;
        }
        if let Some(e) = self.entries.lock().expect("cache lock").get(key) {
            return Some(e.clone());
        }
        let path = self.path_for(key)?;
        let text = std::fs::read_to_string(path).ok()?;
        let entry: CacheEntry = serde_json::from_str(&text).ok()?;
        let shared = Arc::new(CacheEntryShared {
            l_out: entry.l_out,
            inner_loss: entry.inner_loss,
            epochs: entry.epochs,
            params: Arc::new(entry.params),
        });
        self.entries.lock().expect("cache lock").insert(key.clone(), shared.clone());
        Some(shared)
    }

    fn insert(&self, key: CacheKey, entry: CacheEntryShared) -> Result<Arc<CacheEntryShared>> {
        let shared = Arc::new(entry);
        if !self.enabled {
            return Ok(shared);
        }
        if let Some(path) = self.path_for(&key) {
            let record = CacheEntry {
                l_out: shared.l_out,
                inner_loss: shared.inner_loss,
                epochs: shared.epochs,
                params: (*shared.params).clone(),
            };
            let text = serde_json::to_string(&record).map_err(|e| MilError::Serde(e.to_string()))?;
            write_atomic(&path, text.as_bytes())?;
        }
        self.entries.lock().expect("cache lock").insert(key, shared.clone());
        Ok(shared)
    }

    fn path_for(&self, key: &CacheKey) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{}.json", key.file_stem())))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, bytes).map_err(|e| MilError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| MilError::io(path, e))
}

/// Scores masks by training a policy on `train` and evaluating the outer loss
/// on `bundle`, memoized in `cache`.
pub struct TrainingEvaluator<'a> {
    pub train: &'a DemoDataset,
    pub bundle: &'a ValBundle,
    pub config: &'a InnerTrainConfig,
    pub kind: LossKind,
    pub cache: &'a MaskCache,
    context: String,
}

impl<'a> TrainingEvaluator<'a> {
    pub fn new(
        train: &'a DemoDataset,
        bundle: &'a ValBundle,
        config: &'a InnerTrainConfig,
        kind: LossKind,
        cache: &'a MaskCache,
    ) -> Result<Self> {
        config.validate()?;
        bundle.check(kind)?;
        if train.schema != bundle.val.schema {
            return Err(MilError::Schema("training and validation schemas differ".into()));
        }
        if train.normalization != bundle.val.normalization {
            return Err(usage_err!("training and validation data use different normalization"));
        }
        let mut h = Sha256::new();
        h.update(train.fingerprint().as_bytes());
        h.update(bundle.fingerprint().as_bytes());
        h.update(serde_json::to_vec(config).expect("config serialize"));
        let context = hex(&h.finalize()[..16]);
        Ok(Self {
            train,
            bundle,
            config,
            kind,
            cache,
            context,
        })
    }

    fn key(&self, mask: &MaskVector) -> CacheKey {
        CacheKey {
            mask: mask.clone(),
            seed: self.config.seed_base,
            kind: self.kind,
            context: self.context.clone(),
        }
    }
}

impl MaskEvaluator for TrainingEvaluator<'_> {
    fn num_modalities(&self) -> usize {
        self.train.schema.len()
    }

    fn evaluate(&self, mask: &MaskVector) -> Result<MaskEvaluation> {
        let key = self.key(mask);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(MaskEvaluation {
                mask: mask.clone(),
                l_out: hit.l_out,
                inner_loss: hit.inner_loss,
                epochs: hit.epochs,
                epochs_trained: 0,
                cache_hit: true,
                params: Some(hit.params.clone()),
            });
        }
        let trained = train_inner(mask, self.train, self.config, branch_seed(self.config.seed_base, mask))?;
        let l_out = self.bundle.outer_loss(self.kind, &trained.params, mask)?;
        if !l_out.is_finite() {
            return Err(MilError::Numeric(format!("outer loss of mask {mask}")));
        }
        let entry = self.cache.insert(
            key,
            CacheEntryShared {
                l_out,
                inner_loss: trained.final_train_loss,
                epochs: trained.epochs,
                params: Arc::new(trained.params),
            },
        )?;
        Ok(MaskEvaluation {
            mask: mask.clone(),
            l_out,
            inner_loss: entry.inner_loss,
            epochs: entry.epochs,
            epochs_trained: entry.epochs,
            cache_hit: false,
            params: Some(entry.params.clone()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Compare the loss accepted at the last bit of successive sweeps.
    LastBit,
    /// Compare the smallest accepted loss of successive sweeps.
    SweepMin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OuterConfig {
    pub epsilon: f64,
    pub max_sweeps: usize,
    pub stop_rule: StopRule,
}

impl Default for OuterConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            max_sweeps: 8,
            stop_rule: StopRule::LastBit,
        }
    }
}

/// One branch of one bit decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    pub l_out: f64,
    pub inner_loss: f64,
    pub epochs: usize,
    pub cache_hit: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitDecision {
    pub sweep: usize,
    pub bit: usize,
    /// Mask after the decision.
    pub mask: MaskVector,
    pub zero: BranchRecord,
    pub one: BranchRecord,
    pub chosen: u8,
}

impl BitDecision {
    pub fn loss_zero(&self) -> f64 {
        self.zero.l_out
    }

    pub fn loss_one(&self) -> f64 {
        self.one.l_out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterState {
    pub mask: MaskVector,
    pub l_last: Option<f64>,
    pub l_current: f64,
    pub sweep_count: usize,
    pub converged: bool,
    pub history: Vec<BitDecision>,
}

#[derive(Debug, Clone)]
pub struct MilOutcome {
    pub mask: MaskVector,
    pub l_out: f64,
    pub state: OuterState,
    /// Policy trained under the final mask; absent for loss tables.
    pub policy: Option<Arc<PolicyParams>>,
}

fn branch(evaluator: &dyn MaskEvaluator, mask: &MaskVector) -> Result<(BranchRecord, Option<MaskEvaluation>)> {
    match evaluator.evaluate(mask) {
        Ok(e) => Ok((
            BranchRecord {
                l_out: e.l_out,
                inner_loss: e.inner_loss,
                epochs: e.epochs,
                cache_hit: e.cache_hit,
                error: None,
            },
            Some(e),
        )),
        Err(MilError::Numeric(what)) => Ok((
            BranchRecord {
                l_out: f64::INFINITY,
                inner_loss: f64::NAN,
                epochs: 0,
                cache_hit: false,
                error: Some(format!("non-finite value in {what}")),
            },
            None,
        )),
        Err(e) => Err(e),
    }
}

/// Coordinate descent sweeping bits in schema order.
pub fn coordinate_descent(evaluator: &dyn MaskEvaluator, config: &OuterConfig) -> Result<MilOutcome> {
    let order: Vec<usize> = (0..evaluator.num_modalities()).collect();
    permuted_run(evaluator, config, &order)
}

/// Coordinate descent visiting bits in `order`. Masks are always indexed in
/// schema order, so the result needs no remapping.
pub fn permuted_run(evaluator: &dyn MaskEvaluator, config: &OuterConfig, order: &[usize]) -> Result<MilOutcome> {
    let m = evaluator.num_modalities();
    if m == 0 {
        return Err(usage_err!("need at least one modality"));
    }
    validate_permutation(order, m)?;
    if config.epsilon.is_nan() || config.epsilon < 0.0 {
        return Err(usage_err!("epsilon must be nonnegative"));
    }
    if config.max_sweeps == 0 {
        return Err(usage_err!("max_sweeps must be at least 1"));
    }
    let mut state = OuterState {
        mask: MaskVector::ones(m),
        l_last: None,
        l_current: f64::INFINITY,
        sweep_count: 0,
        converged: false,
        history: Vec::new(),
    };
    let mut last_sweep_min: Option<f64> = None;
    let mut final_eval: Option<MaskEvaluation> = None;
    loop {
        state.l_last = if state.sweep_count == 0 { None } else { Some(state.l_current) };
        state.l_current = f64::INFINITY;
        let mut sweep_min = f64::INFINITY;
        for &j in order {
            let m0 = state.mask.set_bit(j, 0)?;
            let m1 = state.mask.set_bit(j, 1)?;
            let (r0, e0) = branch(evaluator, &m0)?;
            let (r1, e1) = branch(evaluator, &m1)?;
            if e0.is_none() && e1.is_none() {
                state.history.push(BitDecision {
                    sweep: state.sweep_count,
                    bit: j,
                    mask: state.mask.clone(),
                    zero: r0.clone(),
                    one: r1.clone(),
                    chosen: 1,
                });
                return Err(MilError::Numeric(format!(
                    "both branches of bit {j} in sweep {} failed ({}; {}) after {} decisions",
                    state.sweep_count,
                    r0.error.unwrap_or_default(),
                    r1.error.unwrap_or_default(),
                    state.history.len() - 1
                )));
            }
            let chosen = u8::from(!(r0.l_out < r1.l_out));
            let (mask, loss, eval) = if chosen == 0 { (m0, r0.l_out, e0) } else { (m1, r1.l_out, e1) };
            state.mask = mask;
            state.l_current = loss;
            sweep_min = sweep_min.min(loss);
            final_eval = eval;
            state.history.push(BitDecision {
                sweep: state.sweep_count,
                bit: j,
                mask: state.mask.clone(),
                zero: r0,
                one: r1,
                chosen,
            });
        }
        state.sweep_count += 1;
        let converged = match config.stop_rule {
            StopRule::LastBit => state.l_last.is_some_and(|l| (state.l_current - l).abs() <= config.epsilon),
            StopRule::SweepMin => last_sweep_min.is_some_and(|l| (sweep_min - l).abs() <= config.epsilon),
        };
        last_sweep_min = Some(sweep_min);
        if converged {
            state.converged = true;
            break;
        }
        if state.sweep_count >= config.max_sweeps {
            break;
        }
    }
    let policy = match final_eval {
        Some(e) if e.mask == state.mask => e.params,
        _ => evaluator.evaluate(&state.mask)?.params,
    };
    Ok(MilOutcome {
        mask: state.mask.clone(),
        l_out: state.l_current,
        state,
        policy,
    })
}
