//! Python module `mil_py`: environments, datasets, coordinate descent over
//! modality masks, and the loss helpers, with masks as bit strings such as
//! `"1011"` (bit 0 first).

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use mil_core::baselines::brute_force_oracle;
use mil_core::bilevel::{permuted_run, LossKind, MilOutcome, OuterConfig, StubLossTable, TrainingEvaluator};
use mil_core::datasets::{DemoDataset, NormStats, Role};
use mil_core::dynamics::{self, DEFAULT_T1, DEFAULT_T2};
use mil_core::envbench::EnvSpec;
use mil_core::experiment::{build_bundle, run_mil_seed, ExperimentConfig, MaskReport, SeedData};
use mil_core::gradcheck::{run_suite, GradcheckConfig};
use mil_core::policy::{MaskVector, PolicyParams};
use mil_core::MilError;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

trait OrRaise<T> {
    fn or_raise(self) -> PyResult<T>;
}

impl<T> OrRaise<T> for Result<T, MilError> {
    fn or_raise(self) -> PyResult<T> {
        self.map_err(|e| match e {
            MilError::Io { .. } => PyIOError::new_err(e.to_string()),
            _ => PyValueError::new_err(e.to_string()),
        })
    }
}

fn parse_mask(bits: &str) -> PyResult<MaskVector> {
    bits.parse::<MaskVector>().or_raise()
}

/// Loss table keyed by bit string, inserted in sorted key order.
pub fn stub_table(losses: &HashMap<String, f64>) -> Result<StubLossTable, MilError> {
    let mut entries: Vec<(&str, f64)> = losses.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    entries.sort_by(|a, b| a.0.cmp(b.0));
    StubLossTable::new(entries)
}

/// One bit decision as `(sweep, bit, mask_after, loss_zero, loss_one, chosen)`.
pub type Decision = (usize, usize, String, f64, f64, u8);

pub fn decisions(outcome: &MilOutcome) -> Vec<Decision> {
    outcome
        .state
        .history
        .iter()
        .map(|d| (d.sweep, d.bit, d.mask.to_string(), d.loss_zero(), d.loss_one(), d.chosen))
        .collect()
}

#[pyclass(name = "EnvSpec", module = "mil_py", frozen)]
struct PyEnvSpec {
    inner: EnvSpec,
}

#[pymethods]
impl PyEnvSpec {
    #[new]
    fn new(name: &str) -> PyResult<Self> {
        Ok(Self {
            inner: EnvSpec::by_name(name).or_raise()?,
        })
    }

    #[getter]
    fn name(&self) -> &'static str {
        self.inner.name()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    #[getter]
    fn modality_names(&self) -> Vec<String> {
        self.inner.schema().names().into_iter().map(String::from).collect()
    }

    #[getter]
    fn action_dim(&self) -> usize {
        self.inner.schema().action_dim()
    }

    #[getter]
    fn oracle_mask(&self) -> String {
        self.inner.oracle_mask().to_string()
    }

    fn generate_demos(&self, role: &str, n: usize, seed: u64) -> PyResult<PyDataset> {
        let role: Role = role.parse().or_raise()?;
        Ok(PyDataset {
            inner: self.inner.generate_demos(role, n, seed).or_raise()?,
        })
    }

    fn expert_action(&self, state: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.expert_action(&state).or_raise()
    }

    fn step(&self, state: Vec<f64>, action: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.step(&state, &action).or_raise()
    }

    fn __repr__(&self) -> String {
        format!("EnvSpec({:?})", self.inner.name())
    }
}

#[pyclass(name = "Dataset", module = "mil_py", frozen)]
struct PyDataset {
    inner: DemoDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: DemoDataset::load(&path).or_raise()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).or_raise()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn role(&self) -> String {
        self.inner.role.to_string()
    }

    #[getter]
    fn num_steps(&self) -> usize {
        self.inner.num_steps()
    }

    #[getter]
    fn modality_names(&self) -> Vec<String> {
        self.inner.schema.names().into_iter().map(String::from).collect()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    /// `(states, actions)` of trajectory `index`.
    fn trajectory(&self, index: usize) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let t = self
            .inner
            .trajectories
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("trajectory {index} out of range")))?;
        Ok((t.states.clone(), t.actions.clone()))
    }

    fn normalized(&self, stats: &PyNormStats) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.normalized(&stats.inner).or_raise()?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Dataset(role={}, trajectories={})", self.inner.role, self.inner.len())
    }
}

#[pyclass(name = "NormStats", module = "mil_py", frozen)]
struct PyNormStats {
    inner: NormStats,
}

#[pymethods]
impl PyNormStats {
    #[staticmethod]
    fn compute(ds: &PyDataset) -> PyResult<Self> {
        Ok(Self {
            inner: NormStats::compute(&ds.inner).or_raise()?,
        })
    }

    fn normalize(&self, state: Vec<f64>) -> Vec<f64> {
        self.inner.normalize(&state)
    }

    fn denormalize(&self, state: Vec<f64>) -> Vec<f64> {
        self.inner.denormalize(&state)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }
}

#[pyclass(name = "ExperimentConfig", module = "mil_py")]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// Defaults, or the given TOML document laid over them.
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(text) => ExperimentConfig::from_toml_str(text).or_raise()?,
            None => ExperimentConfig::default(),
        };
        Ok(Self { inner })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().or_raise()
    }

    #[getter]
    fn get_env(&self) -> String {
        self.inner.env.clone()
    }

    #[setter]
    fn set_env(&mut self, env: String) {
        self.inner.env = env;
    }

    #[getter]
    fn get_seeds(&self) -> Vec<u64> {
        self.inner.seeds.clone()
    }

    #[setter]
    fn set_seeds(&mut self, seeds: Vec<u64>) {
        self.inner.seeds = seeds;
    }

    #[getter]
    fn get_n_train(&self) -> usize {
        self.inner.n_train
    }

    #[setter]
    fn set_n_train(&mut self, n: usize) {
        self.inner.n_train = n;
    }

    #[getter]
    fn get_max_epochs(&self) -> usize {
        self.inner.train.max_epochs
    }

    #[setter]
    fn set_max_epochs(&mut self, n: usize) {
        self.inner.train.max_epochs = n;
    }

    #[getter]
    fn get_test_episodes(&self) -> usize {
        self.inner.test_episodes
    }

    #[setter]
    fn set_test_episodes(&mut self, n: usize) {
        self.inner.test_episodes = n;
    }

    /// Outer loss name; `None` restores the environment default.
    #[getter]
    fn get_loss_kind(&self) -> String {
        self.inner.resolved_loss_kind().to_string()
    }

    #[setter]
    fn set_loss_kind(&mut self, kind: Option<&str>) -> PyResult<()> {
        self.inner.loss_kind = kind.map(str::parse::<LossKind>).transpose().or_raise()?;
        Ok(())
    }
}

/// Policy trained under a fixed mask. States are normalized with the
/// training statistics of the run that produced it.
#[pyclass(name = "Policy", module = "mil_py", frozen)]
struct PyPolicy {
    params: Arc<PolicyParams>,
    mask: MaskVector,
}

#[pymethods]
impl PyPolicy {
    #[getter]
    fn mask(&self) -> String {
        self.mask.to_string()
    }

    /// Action for one normalized flat state, under the policy's own mask
    /// unless another is given.
    #[pyo3(signature = (state, mask = None))]
    fn act(&self, state: Vec<f64>, mask: Option<&str>) -> PyResult<Vec<f64>> {
        let mask = match mask {
            Some(bits) => parse_mask(bits)?,
            None => self.mask.clone(),
        };
        self.params.act_flat(&mask, &state).or_raise()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&*self.params).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

#[pyclass(name = "MilResult", module = "mil_py", frozen)]
struct PyMilResult {
    #[pyo3(get)]
    mask: String,
    #[pyo3(get)]
    l_out: f64,
    #[pyo3(get)]
    sweeps: usize,
    #[pyo3(get)]
    converged: bool,
    /// `(sweep, bit, mask_after, loss_zero, loss_one, chosen)` per decision.
    #[pyo3(get)]
    history: Vec<Decision>,
    #[pyo3(get)]
    metric_name: Option<String>,
    #[pyo3(get)]
    test_metric: Option<f64>,
    #[pyo3(get)]
    report_json: Option<String>,
    policy: Option<(Arc<PolicyParams>, MaskVector)>,
}

#[pymethods]
impl PyMilResult {
    #[getter]
    fn policy(&self) -> Option<PyPolicy> {
        self.policy.as_ref().map(|(params, mask)| PyPolicy {
            params: params.clone(),
            mask: mask.clone(),
        })
    }

    fn __repr__(&self) -> String {
        format!("MilResult(mask={:?}, l_out={}, sweeps={})", self.mask, self.l_out, self.sweeps)
    }
}

impl PyMilResult {
    fn from_outcome(outcome: &MilOutcome) -> Self {
        Self {
            mask: outcome.mask.to_string(),
            l_out: outcome.l_out,
            sweeps: outcome.state.sweep_count,
            converged: outcome.state.converged,
            history: decisions(outcome),
            metric_name: None,
            test_metric: None,
            report_json: None,
            policy: outcome.policy.clone().map(|p| (p, outcome.mask.clone())),
        }
    }
}

/// Coordinate descent over a fixed table of outer losses.
#[pyfunction]
#[pyo3(signature = (losses, order = None, epsilon = 1e-4, max_sweeps = 8))]
fn coordinate_descent_table(
    losses: HashMap<String, f64>,
    order: Option<Vec<usize>>,
    epsilon: f64,
    max_sweeps: usize,
) -> PyResult<PyMilResult> {
    let table = stub_table(&losses).or_raise()?;
    let m = losses.keys().next().map_or(0, String::len);
    let order = order.unwrap_or_else(|| (0..m).collect());
    let config = OuterConfig {
        epsilon,
        max_sweeps,
        ..Default::default()
    };
    let outcome = permuted_run(&table, &config, &order).or_raise()?;
    Ok(PyMilResult::from_outcome(&outcome))
}

/// Full MIL run for one seed: data generation, coordinate descent with
/// inner training, and the test evaluation.
#[pyfunction]
fn run_mil(py: Python<'_>, config: &PyConfig, seed: u64) -> PyResult<PyMilResult> {
    let config = config.inner.clone();
    config.validate().or_raise()?;
    let (report, result) = py
        .detach(move || -> Result<_, MilError> {
            let data = SeedData::generate(&config, seed)?;
            let result = run_mil_seed(&config, &data, &config.cache()?)?;
            let report = MaskReport::new(env!("CARGO_PKG_VERSION"), &config, &data.env, &result);
            Ok((report.to_json(), result))
        })
        .or_raise()?;
    let mut out = PyMilResult::from_outcome(&result.outcome);
    out.metric_name = Some(result.metric.to_string());
    out.test_metric = Some(result.test_metric);
    out.report_json = Some(report);
    Ok(out)
}

/// Every non-empty mask (or every mask) ranked by outer loss, as
/// `(mask, l_out)` pairs, best first.
#[pyfunction]
#[pyo3(signature = (config, seed, include_empty = false))]
fn brute_force(py: Python<'_>, config: &PyConfig, seed: u64, include_empty: bool) -> PyResult<Vec<(String, f64)>> {
    let config = config.inner.clone();
    config.validate().or_raise()?;
    py.detach(move || -> Result<_, MilError> {
        let data = SeedData::generate(&config, seed)?;
        let kind = config.resolved_loss_kind();
        let (bundle, _) = build_bundle(&config, &data, kind)?;
        let train = config.train_for_seed(seed);
        let cache = config.cache()?;
        let evaluator = TrainingEvaluator::new(&data.train, &bundle, &train, kind, &cache)?;
        let ranked = brute_force_oracle(&evaluator, include_empty, None)?;
        Ok(ranked.into_iter().map(|r| (r.mask.to_string(), r.l_out)).collect())
    })
    .or_raise()
}

#[pyfunction]
#[pyo3(signature = (l_s, l_f, t1 = DEFAULT_T1, t2 = DEFAULT_T2))]
fn aug_loss_term(l_s: f64, l_f: f64, t1: f64, t2: f64) -> f64 {
    dynamics::aug_loss_term(l_s, l_f, t1, t2)
}

/// Finite-difference gradient check; returns `(passed, max_rel_error)`.
#[pyfunction]
#[pyo3(signature = (seed = 0, cases = 100))]
fn gradcheck(seed: u64, cases: usize) -> PyResult<(bool, f64)> {
    let report = run_suite(&GradcheckConfig {
        seed,
        cases,
        ..Default::default()
    })
    .or_raise()?;
    Ok((report.passed(), report.max_rel_error()))
}

#[pymodule]
fn mil_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("DEFAULT_T1", DEFAULT_T1)?;
    m.add("DEFAULT_T2", DEFAULT_T2)?;
    m.add_class::<PyEnvSpec>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyNormStats>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyMilResult>()?;
    m.add_function(wrap_pyfunction!(coordinate_descent_table, m)?)?;
    m.add_function(wrap_pyfunction!(run_mil, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force, m)?)?;
    m.add_function(wrap_pyfunction!(aug_loss_term, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_descent_matches_hand_trace() {
        let losses: HashMap<String, f64> = [("11", 1.0), ("01", 0.2), ("10", 0.5), ("00", 0.9)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let table = stub_table(&losses).unwrap();
        let outcome = permuted_run(&table, &OuterConfig::default(), &[0, 1]).unwrap();
        let d = decisions(&outcome);
        assert_eq!(outcome.mask.to_string(), "01");
        assert_eq!(d[0], (0, 0, "01".to_string(), 0.2, 1.0, 0));
        assert_eq!(d.len(), 4);
    }
}
