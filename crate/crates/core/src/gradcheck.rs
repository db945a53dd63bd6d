//! Central finite-difference checks of the analytic gradients of networks
//! and gated policies under the mean squared action loss.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::StepBatch;
use crate::diffnet::{mean_l2_loss_and_grad, Activation, LayerSpec, NetParams, Parameters};
use crate::error::Result;
use crate::policy::{EncoderKind, ModalitySchema, PolicyConfig, PolicyParams};
use crate::seed;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_CASES: usize = 100;
/// Gradients smaller than this are compared in absolute terms.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub cases: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Negative control: perturbs one analytic gradient entry per case so
    /// that every case should fail.
    pub corrupt_analytic: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            cases: DEFAULT_CASES,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
            corrupt_analytic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub label: String,
    pub num_checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub cases: Vec<CaseReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|, MAGNITUDE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.5..1.5))
}

fn random_activation(rng: &mut ChaCha8Rng) -> Activation {
    [Activation::Identity, Activation::Tanh, Activation::LeakyRelu][rng.random_range(0..3)]
}

/// Compares every analytic entry of `analytic` with a central difference of
/// `loss` taken by nudging the matching entry of `params`.
fn compare<P: Parameters + Clone>(
    params: &P,
    analytic: &P,
    step: f64,
    loss: impl Fn(&P) -> Result<f64>,
) -> Result<(usize, f64)> {
    let mut probe = params.clone();
    let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let grads = analytic.tensors();
    let (mut count, mut worst) = (0, 0.0f64);
    for (t, &len) in shapes.iter().enumerate() {
        for i in 0..len {
            let orig = probe.tensors()[t][i];
            probe.tensors_mut()[t][i] = orig + step;
            let up = loss(&probe)?;
            probe.tensors_mut()[t][i] = orig - step;
            let down = loss(&probe)?;
            probe.tensors_mut()[t][i] = orig;
            worst = worst.max(relative_error(grads[t][i], (up - down) / (2.0 * step)));
            count += 1;
        }
    }
    Ok((count, worst))
}

fn compare_inputs(analytic: &[f64], step: f64, base: &[f64], loss: impl Fn(&[f64]) -> Result<f64>) -> Result<f64> {
    let mut x = base.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = loss(&x)?;
        x[i] = orig - step;
        let down = loss(&x)?;
        x[i] = orig;
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * step)));
    }
    Ok(worst)
}

fn corrupt<P: Parameters>(grads: &mut P) {
    if let Some(t) = grads.tensors_mut().into_iter().find(|t| !t.is_empty()) {
        t[0] += 1.0 + 10.0 * t[0].abs();
    }
}

fn net_case(rng: &mut ChaCha8Rng, config: &GradcheckConfig, index: usize) -> Result<CaseReport> {
    let depth = rng.random_range(1..=3);
    let mut dims = vec![rng.random_range(1..=5)];
    for _ in 0..depth {
        dims.push(rng.random_range(1..=5));
    }
    let specs: Vec<LayerSpec> = dims
        .windows(2)
        .map(|w| LayerSpec::new(w[0], w[1], random_activation(rng)))
        .collect();
    let net = NetParams::init(&specs, rng.random())?;
    let rows = rng.random_range(1..=4);
    let x = random_matrix(rng, rows, dims[0]);
    let y = random_matrix(rng, rows, dims[depth]);
    let loss_of = |n: &NetParams, input: &Array2<f64>| -> Result<f64> {
        Ok(mean_l2_loss_and_grad(&n.predict_batch(input.view())?, y.view())?.0)
    };
    let (pred, tape) = net.forward_batch(x.view())?;
    let (_, g) = mean_l2_loss_and_grad(&pred, y.view())?;
    let (mut grads, grad_x) = net.backward(&tape, g.view())?;
    if config.corrupt_analytic {
        corrupt(&mut grads);
    }
    let (count, param_err) = compare(&net, &grads, config.step, |n| loss_of(n, &x))?;
    let flat_x = x.iter().copied().collect::<Vec<_>>();
    let input_err = compare_inputs(grad_x.as_slice().expect("standard layout"), config.step, &flat_x, |v| {
        loss_of(&net, &Array2::from_shape_vec(x.dim(), v.to_vec()).expect("same shape"))
    })?;
    let worst = param_err.max(input_err);
    let labels: Vec<String> = dims.iter().map(usize::to_string).collect();
    Ok(CaseReport {
        label: format!("case {index}: net {} batch {rows}", labels.join("-")),
        num_checked: count + flat_x.len(),
        max_rel_error: worst,
        passed: worst < config.tolerance,
    })
}

fn policy_case(rng: &mut ChaCha8Rng, config: &GradcheckConfig, index: usize) -> Result<CaseReport> {
    let m = rng.random_range(1..=4);
    let names: Vec<(String, usize)> = (0..m).map(|i| (format!("m{i}"), rng.random_range(1..=3))).collect();
    let action_dim = rng.random_range(1..=3);
    let schema = ModalitySchema::new(names, action_dim)?;
    let encoder = if rng.random_bool(0.5) {
        EncoderKind::Mlp {
            hidden: rng.random_range(1..=4),
        }
    } else {
        EncoderKind::Identity
    };
    let policy_config = PolicyConfig {
        encoder,
        head_layers: rng.random_range(1..=3),
        head_hidden: rng.random_range(1..=6),
    };
    let params = PolicyParams::init(&schema, &policy_config, rng.random())?;
    let gates: Vec<f64> = (0..m)
        .map(|_| match rng.random_range(0..3) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random_range(0.05..0.95),
        })
        .collect();
    let rows = rng.random_range(1..=4);
    let batch = StepBatch::new(random_matrix(rng, rows, schema.state_dim()), random_matrix(rng, rows, action_dim))?;
    let (_, mut grads, gate_grads) = params.loss_and_grads_gated(&gates, &batch)?;
    if config.corrupt_analytic {
        corrupt(&mut grads);
    }
    let (count, param_err) = compare(&params, &grads, config.step, |p| Ok(p.loss_and_grads_gated(&gates, &batch)?.0))?;
    let live: Vec<usize> = (0..m).filter(|&i| gates[i] != 0.0).collect();
    let live_grads: Vec<f64> = live.iter().map(|&i| gate_grads[i]).collect();
    let live_gates: Vec<f64> = live.iter().map(|&i| gates[i]).collect();
    let gate_err = compare_inputs(&live_grads, config.step, &live_gates, |v| {
        let mut g = gates.clone();
        for (&i, &value) in live.iter().zip(v) {
            g[i] = value;
        }
        Ok(params.loss_and_grads_gated(&g, &batch)?.0)
    })?;
    let worst = param_err.max(gate_err);
    let bits: Vec<String> = gates.iter().map(|g| format!("{g:.2}")).collect();
    Ok(CaseReport {
        label: format!("case {index}: policy gates [{}] batch {rows}", bits.join(" ")),
        num_checked: count + live.len(),
        max_rel_error: worst,
        passed: worst < config.tolerance,
    })
}

/// Runs `config.cases` randomized cases, alternating between bare networks
/// and gated policies.
pub fn run_suite(config: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = seed::rng(seed::derive_str(config.seed, "gradcheck"));
    let cases = (0..config.cases)
        .map(|i| {
            if i % 2 == 0 {
                net_case(&mut rng, config, i)
            } else {
                policy_case(&mut rng, config, i)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport { config: *config, cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_hand_values() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1e-9, 0.0), 1e-3);
    }

    #[test]
    fn small_suite_passes() {
        let report = run_suite(&GradcheckConfig {
            cases: 12,
            ..Default::default()
        })
        .unwrap();
        assert!(report.passed(), "{:#?}", report.cases);
        assert_eq!(report.cases.len(), 12);
    }

    #[test]
    fn corrupted_gradients_fail_every_case() {
        let report = run_suite(&GradcheckConfig {
            cases: 6,
            corrupt_analytic: true,
            ..Default::default()
        })
        .unwrap();
        assert!(report.cases.iter().all(|c| !c.passed));
    }
}
