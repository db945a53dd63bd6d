//! Fully-connected networks with exact reverse-mode gradients and Adam.
//!
//! Everything is `f64`. A [`NetParams`] is an immutable-by-convention value:
//! [`NetParams::forward_batch`] returns a [`Tape`] that carries exactly what
//! [`NetParams::backward`] needs, so forward and backward are pure functions
//! of their arguments. A network with zero layers is the identity map.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, MilError, Result};
use crate::seed;

pub const LEAKY_RELU_SLOPE: f64 = 0.01;
pub const CHECKPOINT_FORMAT: &str = "mil-net/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    LeakyRelu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    LEAKY_RELU_SLOPE * z
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            output_dim,
            activation,
        }
    }
}

/// Layer specs for an MLP `input -> hidden.. -> output` with `hidden_act`
/// between layers and an identity output layer.
pub fn mlp_specs(
    input_dim: usize,
    hidden: &[usize],
    output_dim: usize,
    hidden_act: Activation,
) -> Vec<LayerSpec> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input_dim);
    dims.extend_from_slice(hidden);
    dims.push(output_dim);
    dims.windows(2)
        .enumerate()
        .map(|(k, w)| {
            let act = if k + 2 == dims.len() {
                Activation::Identity
            } else {
                hidden_act
            };
            LayerSpec::new(w[0], w[1], act)
        })
        .collect()
}

pub fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    for (k, s) in specs.iter().enumerate() {
        if s.input_dim == 0 || s.output_dim == 0 {
            return Err(MilError::Schema(format!("layer {k} has a zero dimension")));
        }
        if k > 0 && specs[k - 1].output_dim != s.input_dim {
            return Err(MilError::Schema(format!(
                "layer {} outputs {} but layer {k} expects {}",
                k - 1,
                specs[k - 1].output_dim,
                s.input_dim
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `output_dim x input_dim`, row-major.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        LayerSpec::new(self.weight.ncols(), self.weight.nrows(), self.activation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    input_dim: usize,
    layers: Vec<Layer>,
}

/// Cached per-layer values of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// `activations[k]` is the input of layer k; the last entry is the output.
    activations: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("tape always holds the input")
    }

    pub fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre_activations
    }

    pub fn batch_size(&self) -> usize {
        self.activations[0].nrows()
    }
}

impl NetParams {
    /// Glorot-uniform weights drawn from a ChaCha stream keyed by `seed`; zero biases.
    pub fn init(specs: &[LayerSpec], seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(MilError::Schema(
                "at least one layer spec is required; use NetParams::identity".into(),
            ));
        }
        validate_specs(specs)?;
        let mut rng = seed::rng(seed);
        let layers = specs
            .iter()
            .map(|s| {
                let limit = (6.0 / (s.input_dim + s.output_dim) as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((s.output_dim, s.input_dim), || {
                    rng.random_range(-limit..=limit)
                });
                Layer {
                    weight,
                    bias: Array1::zeros(s.output_dim),
                    activation: s.activation,
                }
            })
            .collect();
        Ok(Self {
            input_dim: specs[0].input_dim,
            layers,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            input_dim: dim,
            layers: Vec::new(),
        }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| MilError::Schema("no layers given".into()))?;
        let input_dim = first.weight.ncols();
        let specs: Vec<LayerSpec> = layers.iter().map(Layer::spec).collect();
        validate_specs(&specs)?;
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(shape_err!("layer {k}: bias length {} vs {} rows", l.bias.len(), l.weight.nrows()));
            }
        }
        Ok(Self { input_dim, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers
            .last()
            .map_or(self.input_dim, |l| l.weight.nrows())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn is_identity(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            input_dim: self.input_dim,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                    activation: l.activation,
                })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Batched forward pass; rows of `input` are samples.
    pub fn forward_batch(&self, input: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Tape)> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(input.to_owned());
        for layer in &self.layers {
            let x = activations.last().expect("non-empty");
            let mut z = x.dot(&layer.weight.t());
            z += &layer.bias;
            let a = z.mapv(|v| layer.activation.apply(v));
            pre_activations.push(z);
            activations.push(a);
        }
        let tape = Tape {
            activations,
            pre_activations,
        };
        Ok((tape.output().clone(), tape))
    }

    /// Forward pass without keeping a tape.
    pub fn predict_batch(&self, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(input)?;
        let mut x = input.to_owned();
        for layer in &self.layers {
            let mut z = x.dot(&layer.weight.t());
            z += &layer.bias;
            z.mapv_inplace(|v| layer.activation.apply(v));
            x = z;
        }
        Ok(x)
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| shape_err!("{e}"))?;
        let (out, tape) = self.forward_batch(x)?;
        Ok((out.into_raw_vec_and_offset().0, tape))
    }

    fn check_input(&self, input: ArrayView2<'_, f64>) -> Result<()> {
        if input.ncols() != self.input_dim {
            return Err(shape_err!(
                "network expects input width {}, got {}",
                self.input_dim,
                input.ncols()
            ));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(MilError::Numeric("network input".into()));
        }
        Ok(())
    }

    /// Reverse-mode derivatives of `sum(output * grad_output)` with respect to
    /// parameters and input.
    pub fn backward(
        &self,
        tape: &Tape,
        grad_output: ArrayView2<'_, f64>,
    ) -> Result<(NetParams, Array2<f64>)> {
        if tape.pre_activations.len() != self.layers.len() {
            return Err(shape_err!(
                "tape has {} layers, network has {}",
                tape.pre_activations.len(),
                self.layers.len()
            ));
        }
        if grad_output.dim() != tape.output().dim() {
            return Err(shape_err!(
                "grad_output {:?} does not match output {:?}",
                grad_output.dim(),
                tape.output().dim()
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = grad_output.to_owned();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let dz = match layer.activation {
                Activation::Identity => delta,
                Activation::Tanh => {
                    let a = &tape.activations[k + 1];
                    ndarray::Zip::from(&mut delta)
                        .and(a)
                        .for_each(|d, &y| *d *= 1.0 - y * y);
                    delta
                }
                Activation::LeakyRelu => {
                    let z = &tape.pre_activations[k];
                    ndarray::Zip::from(&mut delta).and(z).for_each(|d, &zv| {
                        if zv <= 0.0 {
                            *d *= LEAKY_RELU_SLOPE;
                        }
                    });
                    delta
                }
            };
            let grad_w = dz.t().dot(&tape.activations[k]).as_standard_layout().into_owned();
            let grad_b = dz.sum_axis(Axis(0));
            delta = dz.dot(&layer.weight);
            grads.push(Layer {
                weight: grad_w,
                bias: grad_b,
                activation: layer.activation,
            });
        }
        grads.reverse();
        Ok((
            NetParams {
                input_dim: self.input_dim,
                layers: grads,
            },
            delta,
        ))
    }

    pub fn backward_vec(&self, tape: &Tape, grad_output: &[f64]) -> Result<(NetParams, Vec<f64>)> {
        let g = ArrayView2::from_shape((1, grad_output.len()), grad_output)
            .map_err(|e| shape_err!("{e}"))?;
        let (grads, gin) = self.backward(tape, g)?;
        Ok((grads, gin.into_raw_vec_and_offset().0))
    }

    pub fn to_record(&self) -> NetRecord {
        NetRecord {
            format: CHECKPOINT_FORMAT.to_string(),
            input_dim: self.input_dim,
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    input_dim: l.weight.ncols(),
                    output_dim: l.weight.nrows(),
                    activation: l.activation,
                    weight: l.weight.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_record(record: NetRecord) -> Result<Self> {
        if record.format != CHECKPOINT_FORMAT {
            return Err(MilError::Serde(format!(
                "unsupported network format {:?}",
                record.format
            )));
        }
        if record.layers.is_empty() {
            return Ok(Self::identity(record.input_dim));
        }
        let layers = record
            .layers
            .into_iter()
            .map(|l| {
                let weight = Array2::from_shape_vec((l.output_dim, l.input_dim), l.weight)
                    .map_err(|e| shape_err!("checkpoint weight: {e}"))?;
                Ok(Layer {
                    weight,
                    bias: Array1::from(l.bias),
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let net = Self::from_layers(layers)?;
        if net.input_dim != record.input_dim {
            return Err(shape_err!("checkpoint input_dim disagrees with first layer"));
        }
        Ok(net)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_record())
            .map_err(|e| MilError::Serde(e.to_string()))?;
        fs::write(path, text).map_err(|e| MilError::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MilError::io(path, e))?;
        let record: NetRecord =
            serde_json::from_str(&text).map_err(|e| MilError::Serde(e.to_string()))?;
        Self::from_record(record)
    }
}

/// On-disk layout of a network checkpoint. Weights are row-major
/// (`output_dim` rows of `input_dim` values); floats are written in shortest
/// round-trip decimal form so a load reproduces every bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetRecord {
    pub format: String,
    pub input_dim: usize,
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Serialize for NetParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_record().serialize(s)
    }
}

impl<'de> Deserialize<'de> for NetParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let record = NetRecord::deserialize(d)?;
        NetParams::from_record(record).map_err(serde::de::Error::custom)
    }
}

/// Squared L2 error of one prediction: `sum((pred - target)^2)` and its gradient.
pub fn l2_loss_and_grad(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(shape_err!(
            "prediction length {} vs target length {}",
            pred.len(),
            target.len()
        ));
    }
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d
        })
        .collect();
    Ok((loss, grad))
}

/// Batch mean of per-row squared L2 errors and the gradient of that mean.
pub fn mean_l2_loss_and_grad(
    pred: &Array2<f64>,
    target: ArrayView2<'_, f64>,
) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != target.dim() {
        return Err(shape_err!("prediction {:?} vs target {:?}", pred.dim(), target.dim()));
    }
    let n = pred.nrows();
    if n == 0 {
        return Err(MilError::Usage("empty batch".into()));
    }
    let diff = pred - &target;
    let loss = row_sq_sum(&diff) / n as f64;
    let grad = diff * (2.0 / n as f64);
    Ok((loss, grad))
}

/// Sum of squared entries accumulated row by row in index order.
pub(crate) fn row_sq_sum(m: &Array2<f64>) -> f64 {
    m.rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>())
        .sum()
}

/// A set of parameter tensors that Adam can update in place.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;
    fn tensor_label(&self, index: usize) -> String {
        format!("parameter tensor {index}")
    }
}

impl Parameters for NetParams {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    fn tensor_label(&self, index: usize) -> String {
        let kind = if index % 2 == 0 { "weight" } else { "bias" };
        format!("gradient of layer {} {kind}", index / 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(MilError::Usage(format!("invalid Adam hyperparameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(params: &impl Parameters, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<P: Parameters>(params: &mut P, grads: &P, state: &mut AdamState) -> Result<()> {
    state.config.validate()?;
    let grad_tensors = grads.tensors();
    if grad_tensors.len() != state.first_moment.len() {
        return Err(shape_err!(
            "{} gradient tensors vs {} optimizer slots",
            grad_tensors.len(),
            state.first_moment.len()
        ));
    }
    for (i, g) in grad_tensors.iter().enumerate() {
        if g.len() != state.first_moment[i].len() {
            return Err(shape_err!("gradient tensor {i} has length {}", g.len()));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(MilError::Numeric(grads.tensor_label(i)));
        }
    }
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let mut targets = params.tensors_mut();
    if targets.len() != grad_tensors.len() {
        return Err(shape_err!("parameter and gradient tensor counts differ"));
    }
    for (i, theta) in targets.iter_mut().enumerate() {
        let g = grad_tensors[i];
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for j in 0..theta.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            theta[j] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
