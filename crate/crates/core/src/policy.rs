//! Masked policy: one encoder per state modality, a gate per modality, and an
//! action head over the concatenated gated features:
//!
//! `action = head([g_1 * enc_1(s_1), ..., g_M * enc_M(s_M)])`
//!
//! With a binary [`MaskVector`] the gates are exactly 0 or 1. A gated-off
//! modality keeps its slot in the head input (filled with zeros), so the head
//! shape never depends on the mask. Its encoder is never evaluated, which
//! makes the output independent of that modality's values and its encoder
//! gradient exactly zero.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datasets::StepBatch;
use crate::diffnet::{mean_l2_loss_and_grad, mlp_specs, Activation, LayerSpec, NetParams, Parameters, Tape};
use crate::error::{shape_err, usage_err, MilError, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Modality {
    pub name: String,
    pub dim: usize,
}

/// Names and widths of the state modalities plus the action width. The
/// modality order is canonical: it is the default coordinate-descent order
/// and the bit order of every mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalitySchema {
    modalities: Vec<Modality>,
    action_dim: usize,
}

impl ModalitySchema {
    pub fn new<S: Into<String>>(
        modalities: impl IntoIterator<Item = (S, usize)>,
        action_dim: usize,
    ) -> Result<Self> {
        let modalities: Vec<Modality> = modalities
            .into_iter()
            .map(|(n, dim)| Modality {
                name: n.into(),
                dim,
            })
            .collect();
        let schema = Self {
            modalities,
            action_dim,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(MilError::Schema("at least one modality is required".into()));
        }
        if self.action_dim == 0 {
            return Err(MilError::Schema("action_dim must be positive".into()));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if m.dim == 0 {
                return Err(MilError::Schema(format!("modality {:?} has zero width", m.name)));
            }
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return Err(MilError::Schema(format!("duplicate modality name {:?}", m.name)));
            }
        }
        Ok(())
    }

    pub fn modalities(&self) -> &[Modality] {
        &self.modalities
    }

    /// Number of modalities `M`.
    pub fn len(&self) -> usize {
        self.modalities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modalities.is_empty()
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn state_dim(&self) -> usize {
        self.modalities.iter().map(|m| m.dim).sum()
    }

    pub fn names(&self) -> Vec<&str> {
        self.modalities.iter().map(|m| m.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m.name == name)
    }

    /// Column range of each modality inside a flat state vector.
    pub fn ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.modalities
            .iter()
            .map(|m| {
                let r = start..start + m.dim;
                start += m.dim;
                r
            })
            .collect()
    }

    pub fn flatten(&self, per_modality: &[Vec<f64>]) -> Result<Vec<f64>> {
        if per_modality.len() != self.len() {
            return Err(shape_err!(
                "expected {} modalities, got {}",
                self.len(),
                per_modality.len()
            ));
        }
        let mut flat = Vec::with_capacity(self.state_dim());
        for (m, v) in self.modalities.iter().zip(per_modality) {
            if v.len() != m.dim {
                return Err(shape_err!("modality {:?} expects {} values, got {}", m.name, m.dim, v.len()));
            }
            flat.extend_from_slice(v);
        }
        Ok(flat)
    }

    pub fn split<'a>(&self, flat: &'a [f64]) -> Vec<&'a [f64]> {
        self.ranges().into_iter().map(|r| &flat[r]).collect()
    }

    /// The same schema with modalities listed in `order` (a permutation of
    /// canonical indices).
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        validate_permutation(order, self.len())?;
        Ok(Self {
            modalities: order.iter().map(|&i| self.modalities[i].clone()).collect(),
            action_dim: self.action_dim,
        })
    }
}

pub fn validate_permutation(order: &[usize], m: usize) -> Result<()> {
    let mut seen = vec![false; m];
    if order.len() != m {
        return Err(usage_err!("order has {} entries for {m} modalities", order.len()));
    }
    for &i in order {
        if i >= m || seen[i] {
            return Err(usage_err!("{order:?} is not a permutation of 0..{m}"));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Binary gate per modality. Displays as a bit string with bit 0 first,
/// e.g. `"1011"`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MaskVector {
    bits: Vec<u8>,
}

impl MaskVector {
    pub fn ones(m: usize) -> Self {
        Self { bits: vec![1; m] }
    }

    pub fn zeros(m: usize) -> Self {
        Self { bits: vec![0; m] }
    }

    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        if bits.is_empty() {
            return Err(usage_err!("empty mask"));
        }
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(usage_err!("mask entries must be 0 or 1, found {b}"));
        }
        Ok(Self {
            bits: bits.to_vec(),
        })
    }

    /// Mask number `code` of the `2^m` masks; bit `i` of the mask is bit `i` of `code`.
    pub fn from_index(code: u64, m: usize) -> Self {
        Self {
            bits: (0..m).map(|i| ((code >> i) & 1) as u8).collect(),
        }
    }

    pub fn index(&self) -> u64 {
        self.bits
            .iter()
            .enumerate()
            .fold(0, |acc, (i, &b)| acc | (u64::from(b) << i))
    }

    /// Every mask of width `m`, in index order.
    pub fn all(m: usize) -> impl Iterator<Item = MaskVector> {
        (0..(1u64 << m)).map(move |c| MaskVector::from_index(c, m))
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, i: usize) -> u8 {
        self.bits[i]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn is_all_zeros(&self) -> bool {
        self.count_ones() == 0
    }

    /// Copy with bit `index` set to `value`.
    pub fn set_bit(&self, index: usize, value: u8) -> Result<Self> {
        if index >= self.bits.len() {
            return Err(usage_err!("bit {index} out of range for mask of width {}", self.bits.len()));
        }
        if value > 1 {
            return Err(usage_err!("mask value must be 0 or 1, got {value}"));
        }
        let mut bits = self.bits.clone();
        bits[index] = value;
        Ok(Self { bits })
    }

    pub fn gates(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| f64::from(b)).collect()
    }
}

impl fmt::Display for MaskVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.bits {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

impl FromStr for MaskVector {
    type Err = MilError;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(usage_err!("invalid mask character {other:?} in {s:?}")),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::from_bits(&bits)
    }
}

impl Serialize for MaskVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for MaskVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EncoderKind {
    /// Feature = raw (normalized) modality.
    Identity,
    /// Two tanh layers, `dim -> hidden -> hidden`.
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub encoder: EncoderKind,
    /// Number of affine layers in the action head.
    pub head_layers: usize,
    pub head_hidden: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::Identity,
            head_layers: 3,
            head_hidden: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub schema: ModalitySchema,
    pub encoders: Vec<NetParams>,
    pub head: NetParams,
    /// Fingerprint of the normalization statistics the policy was trained under.
    pub stats_fingerprint: Option<String>,
}

/// Per-forward cache for [`PolicyParams::backward_gated`].
#[derive(Debug, Clone)]
pub struct PolicyTape {
    gates: Vec<f64>,
    encoder_tapes: Vec<Option<Tape>>,
    head_tape: Tape,
}

impl PolicyParams {
    pub fn init(schema: &ModalitySchema, config: &PolicyConfig, seed: u64) -> Result<Self> {
        schema.validate()?;
        if config.head_layers == 0 {
            return Err(usage_err!("head needs at least one layer"));
        }
        let encoders = schema
            .modalities()
            .iter()
            .enumerate()
            .map(|(i, m)| match config.encoder {
                EncoderKind::Identity => Ok(NetParams::identity(m.dim)),
                EncoderKind::Mlp { hidden } => NetParams::init(
                    &[
                        LayerSpec::new(m.dim, hidden, Activation::Tanh),
                        LayerSpec::new(hidden, hidden, Activation::Tanh),
                    ],
                    seed::derive(seed, i as u64),
                ),
            })
            .collect::<Result<Vec<_>>>()?;
        let feature_dim: usize = encoders.iter().map(NetParams::output_dim).sum();
        let hidden = vec![config.head_hidden; config.head_layers - 1];
        let head = NetParams::init(
            &mlp_specs(feature_dim, &hidden, schema.action_dim(), Activation::Tanh),
            seed::derive_str(seed, "head"),
        )?;
        Ok(Self {
            schema: schema.clone(),
            encoders,
            head,
            stats_fingerprint: None,
        })
    }

    /// Assemble a policy from explicit networks, checking that shapes chain.
    pub fn from_parts(schema: ModalitySchema, encoders: Vec<NetParams>, head: NetParams) -> Result<Self> {
        if encoders.len() != schema.len() {
            return Err(shape_err!("{} encoders for {} modalities", encoders.len(), schema.len()));
        }
        for (e, m) in encoders.iter().zip(schema.modalities()) {
            if e.input_dim() != m.dim {
                return Err(shape_err!("encoder for {:?} takes {} inputs, modality has {}", m.name, e.input_dim(), m.dim));
            }
        }
        let feature_dim: usize = encoders.iter().map(NetParams::output_dim).sum();
        if head.input_dim() != feature_dim {
            return Err(shape_err!("head takes {} inputs, features total {feature_dim}", head.input_dim()));
        }
        if head.output_dim() != schema.action_dim() {
            return Err(shape_err!("head outputs {}, action_dim is {}", head.output_dim(), schema.action_dim()));
        }
        Ok(Self {
            schema,
            encoders,
            head,
            stats_fingerprint: None,
        })
    }

    pub fn with_stats_fingerprint(mut self, fingerprint: Option<String>) -> Self {
        self.stats_fingerprint = fingerprint;
        self
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            schema: self.schema.clone(),
            encoders: self.encoders.iter().map(NetParams::zeros_like).collect(),
            head: self.head.zeros_like(),
            stats_fingerprint: self.stats_fingerprint.clone(),
        }
    }

    fn feature_slots(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.encoders
            .iter()
            .map(|e| {
                let r = start..start + e.output_dim();
                start += e.output_dim();
                r
            })
            .collect()
    }

    fn check(&self, states: ArrayView2<'_, f64>, gates: &[f64]) -> Result<()> {
        if gates.len() != self.schema.len() {
            return Err(shape_err!("{} gates for {} modalities", gates.len(), self.schema.len()));
        }
        if states.ncols() != self.schema.state_dim() {
            return Err(shape_err!(
                "state width {} does not match schema width {}",
                states.ncols(),
                self.schema.state_dim()
            ));
        }
        Ok(())
    }

    fn head_input(
        &self,
        states: ArrayView2<'_, f64>,
        gates: &[f64],
        mut keep_tape: Option<&mut Vec<Option<Tape>>>,
    ) -> Result<Array2<f64>> {
        let slots = self.feature_slots();
        let mut features = Array2::zeros((states.nrows(), self.head.input_dim()));
        for (i, range) in self.schema.ranges().into_iter().enumerate() {
            let gate = gates[i];
            if gate == 0.0 {
                if let Some(t) = keep_tape.as_deref_mut() {
                    t.push(None);
                }
                continue;
            }
            let input = states.slice(s![.., range]);
            let encoded = if let Some(t) = keep_tape.as_deref_mut() {
                let (f, tape) = self.encoders[i].forward_batch(input)?;
                t.push(Some(tape));
                f
            } else {
                self.encoders[i].predict_batch(input)?
            };
            let mut slot = features.slice_mut(s![.., slots[i].clone()]);
            if gate == 1.0 {
                slot.assign(&encoded);
            } else {
                slot.assign(&(encoded * gate));
            }
        }
        Ok(features)
    }

    /// Batched forward with arbitrary per-modality gate values.
    pub fn forward_gated(&self, states: ArrayView2<'_, f64>, gates: &[f64]) -> Result<(Array2<f64>, PolicyTape)> {
        self.check(states, gates)?;
        let mut encoder_tapes = Vec::with_capacity(gates.len());
        let features = self.head_input(states, gates, Some(&mut encoder_tapes))?;
        let (out, head_tape) = self.head.forward_batch(features.view())?;
        Ok((
            out,
            PolicyTape {
                gates: gates.to_vec(),
                encoder_tapes,
                head_tape,
            },
        ))
    }

    pub fn predict_gated(&self, states: ArrayView2<'_, f64>, gates: &[f64]) -> Result<Array2<f64>> {
        self.check(states, gates)?;
        let features = self.head_input(states, gates, None)?;
        self.head.predict_batch(features.view())
    }

    pub fn predict(&self, mask: &MaskVector, states: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.predict_gated(states, &mask.gates())
    }

    /// Action for one state given as per-modality vectors.
    pub fn act(&self, mask: &MaskVector, state: &[Vec<f64>]) -> Result<Vec<f64>> {
        let flat = self.schema.flatten(state)?;
        self.act_flat(mask, &flat)
    }

    pub fn act_flat(&self, mask: &MaskVector, state: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, state.len()), state).map_err(|e| shape_err!("{e}"))?;
        Ok(self.predict(mask, x)?.into_raw_vec_and_offset().0)
    }

    /// Gradients of `sum(output * grad_output)` with respect to every network
    /// and to each gate. Gate gradients are reported as 0 for gates that are
    /// exactly 0 (their encoders were not evaluated).
    pub fn backward_gated(
        &self,
        tape: &PolicyTape,
        grad_output: ArrayView2<'_, f64>,
    ) -> Result<(PolicyParams, Vec<f64>)> {
        let (head_grad, grad_features) = self.head.backward(&tape.head_tape, grad_output)?;
        let slots = self.feature_slots();
        let mut encoder_grads = Vec::with_capacity(self.encoders.len());
        let mut gate_grads = vec![0.0; self.encoders.len()];
        for (i, enc) in self.encoders.iter().enumerate() {
            match &tape.encoder_tapes[i] {
                None => encoder_grads.push(enc.zeros_like()),
                Some(enc_tape) => {
                    let g_slot = grad_features.slice(s![.., slots[i].clone()]);
                    let feature = enc_tape.output();
                    gate_grads[i] = g_slot
                        .rows()
                        .into_iter()
                        .zip(feature.rows())
                        .map(|(g, f)| g.dot(&f))
                        .sum();
                    let g_enc = &g_slot * tape.gates[i];
                    let (g, _) = enc.backward(enc_tape, g_enc.view())?;
                    encoder_grads.push(g);
                }
            }
        }
        Ok((
            PolicyParams {
                schema: self.schema.clone(),
                encoders: encoder_grads,
                head: head_grad,
                stats_fingerprint: self.stats_fingerprint.clone(),
            },
            gate_grads,
        ))
    }

    /// Mean squared action error over the batch and its exact gradient.
    pub fn loss_and_grads(&self, mask: &MaskVector, batch: &StepBatch) -> Result<(f64, PolicyParams)> {
        let (loss, grads, _) = self.loss_and_grads_gated(&mask.gates(), batch)?;
        Ok((loss, grads))
    }

    pub fn loss_and_grads_gated(
        &self,
        gates: &[f64],
        batch: &StepBatch,
    ) -> Result<(f64, PolicyParams, Vec<f64>)> {
        if batch.is_empty() {
            return Err(usage_err!("policy loss needs a non-empty batch"));
        }
        let (pred, tape) = self.forward_gated(batch.states.view(), gates)?;
        let (loss, grad) = mean_l2_loss_and_grad(&pred, batch.actions.view())?;
        let (grads, gate_grads) = self.backward_gated(&tape, grad.view())?;
        Ok((loss, grads, gate_grads))
    }
}

impl Parameters for PolicyParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.encoders.iter().flat_map(|e| e.tensors()).collect();
        out.extend(self.head.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.encoders.iter_mut().flat_map(|e| e.tensors_mut()).collect();
        out.extend(self.head.tensors_mut());
        out
    }

    fn tensor_label(&self, index: usize) -> String {
        let mut offset = 0;
        for (i, e) in self.encoders.iter().enumerate() {
            let n = e.layers().len() * 2;
            if index < offset + n {
                return format!("encoder {i} {}", e.tensor_label(index - offset));
            }
            offset += n;
        }
        format!("head {}", self.head.tensor_label(index - offset))
    }
}

/// Anything that maps (normalized) flat states to actions.
pub trait ActionPolicy {
    fn act_batch(&self, states: ArrayView2<'_, f64>) -> Result<Array2<f64>>;

    fn act_one(&self, state: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, state.len()), state).map_err(|e| shape_err!("{e}"))?;
        Ok(self.act_batch(x)?.into_raw_vec_and_offset().0)
    }

    /// Normalization fingerprint the policy expects its inputs to carry.
    fn stats_fingerprint(&self) -> Option<&str> {
        None
    }
}

/// A policy paired with fixed gate values.
#[derive(Debug, Clone)]
pub struct MaskedPolicy<'a> {
    pub params: &'a PolicyParams,
    pub gates: Vec<f64>,
}

impl<'a> MaskedPolicy<'a> {
    pub fn new(params: &'a PolicyParams, mask: &MaskVector) -> Self {
        Self {
            params,
            gates: mask.gates(),
        }
    }

    pub fn with_gates(params: &'a PolicyParams, gates: Vec<f64>) -> Self {
        Self { params, gates }
    }
}

impl ActionPolicy for MaskedPolicy<'_> {
    fn act_batch(&self, states: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.params.predict_gated(states, &self.gates)
    }

    fn stats_fingerprint(&self) -> Option<&str> {
        self.params.stats_fingerprint.as_deref()
    }
}

/// Policy defined by a closure over one state.
pub struct FnPolicy<F> {
    f: F,
    action_dim: usize,
}

impl<F: Fn(&[f64]) -> Vec<f64>> FnPolicy<F> {
    pub fn new(action_dim: usize, f: F) -> Self {
        Self { f, action_dim }
    }
}

impl<F: Fn(&[f64]) -> Vec<f64>> ActionPolicy for FnPolicy<F> {
    fn act_batch(&self, states: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((states.nrows(), self.action_dim));
        for (i, row) in states.rows().into_iter().enumerate() {
            let state: Vec<f64> = row.to_vec();
            let a = (self.f)(&state);
            if a.len() != self.action_dim {
                return Err(shape_err!("closure policy returned {} values", a.len()));
            }
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&a[..]));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::Layer;
    use ndarray::{array, Array1};

    fn two_scalar_schema() -> ModalitySchema {
        ModalitySchema::new([("a", 1), ("b", 1)], 1).unwrap()
    }

    /// Identity encoders and a head that sums its inputs.
    fn summing_policy(bias: f64) -> PolicyParams {
        let head = NetParams::from_layers(vec![Layer {
            weight: array![[1.0, 1.0]],
            bias: array![bias],
            activation: Activation::Identity,
        }])
        .unwrap();
        PolicyParams::from_parts(
            two_scalar_schema(),
            vec![NetParams::identity(1), NetParams::identity(1)],
            head,
        )
        .unwrap()
    }

    #[test]
    fn forward_hand_values() {
        let p = summing_policy(0.0);
        let st = vec![vec![2.0], vec![5.0]];
        assert_eq!(p.act(&"11".parse().unwrap(), &st).unwrap(), vec![7.0]);
        assert_eq!(p.act(&"10".parse().unwrap(), &st).unwrap(), vec![2.0]);
        let p = summing_policy(0.5);
        let z: MaskVector = "00".parse().unwrap();
        assert_eq!(p.act(&z, &st).unwrap(), vec![0.5]);
        assert_eq!(p.act(&z, &[vec![-9.0], vec![3.0]]).unwrap(), vec![0.5]);
    }

    #[test]
    fn forward_rejects_bad_dims() {
        let p = summing_policy(0.0);
        let m = MaskVector::ones(2);
        assert!(matches!(p.act(&m, &[vec![1.0, 2.0], vec![1.0]]), Err(MilError::Shape(_))));
        assert!(matches!(p.act(&m, &[vec![1.0]]), Err(MilError::Shape(_))));
    }

    #[test]
    fn set_bit_cases() {
        let m: MaskVector = "111".parse().unwrap();
        assert_eq!(m.set_bit(1, 0).unwrap().to_string(), "101");
        assert_eq!(m.to_string(), "111");
        let m: MaskVector = "01".parse().unwrap();
        assert_eq!(m.set_bit(0, 0).unwrap().to_string(), "01");
        let m: MaskVector = "10".parse().unwrap();
        assert_eq!(m.set_bit(1, 1).unwrap().to_string(), "11");
        assert!(matches!(m.set_bit(2, 1), Err(MilError::Usage(_))));
    }

    #[test]
    fn mask_index_round_trip() {
        for m in MaskVector::all(4) {
            assert_eq!(MaskVector::from_index(m.index(), 4), m);
        }
        assert_eq!(MaskVector::from_index(1, 3).to_string(), "100");
        assert!("1021".parse::<MaskVector>().is_err());
    }

    #[test]
    fn linear_policy_loss_hand_value() {
        let w = 0.8;
        let schema = ModalitySchema::new([("s", 1)], 1).unwrap();
        let head = NetParams::from_layers(vec![Layer {
            weight: array![[w]],
            bias: Array1::zeros(1),
            activation: Activation::Identity,
        }])
        .unwrap();
        let p = PolicyParams::from_parts(schema, vec![NetParams::identity(1)], head).unwrap();
        let batch = StepBatch::new(array![[1.0]], array![[0.0]]).unwrap();
        let (loss, g) = p.loss_and_grads(&MaskVector::ones(1), &batch).unwrap();
        assert!((loss - w * w).abs() < 1e-15);
        assert!((g.head.layers()[0].weight[[0, 0]] - 2.0 * w).abs() < 1e-15);
    }

    #[test]
    fn perfect_fit_has_zero_loss_and_grads() {
        let p = summing_policy(0.0);
        let batch = StepBatch::new(array![[1.0, 2.0], [0.5, -1.0]], array![[3.0], [-0.5]]).unwrap();
        let (loss, g) = p.loss_and_grads(&MaskVector::ones(2), &batch).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.tensors().concat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_batch_is_usage_error() {
        let p = summing_policy(0.0);
        let batch = StepBatch::new(Array2::zeros((0, 2)), Array2::zeros((0, 1))).unwrap();
        assert!(matches!(p.loss_and_grads(&MaskVector::ones(2), &batch), Err(MilError::Usage(_))));
    }

    #[test]
    fn masked_encoder_grads_are_zero_with_mlp_encoders() {
        let schema = ModalitySchema::new([("a", 2), ("b", 3), ("c", 1)], 2).unwrap();
        let cfg = PolicyConfig {
            encoder: EncoderKind::Mlp { hidden: 4 },
            head_layers: 2,
            head_hidden: 5,
        };
        let p = PolicyParams::init(&schema, &cfg, 3).unwrap();
        let states = Array2::from_shape_fn((7, 6), |(i, j)| ((i * 6 + j) as f64 * 0.37).sin());
        let actions = Array2::from_shape_fn((7, 2), |(i, j)| ((i + j) as f64 * 0.11).cos());
        let batch = StepBatch::new(states, actions).unwrap();
        let mask: MaskVector = "101".parse().unwrap();
        let (_, g) = p.loss_and_grads(&mask, &batch).unwrap();
        assert!(g.encoders[1].tensors().concat().iter().all(|&v| v == 0.0));
        assert!(g.encoders[0].tensors().concat().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn schema_validation() {
        assert!(ModalitySchema::new([("a", 1), ("a", 2)], 1).is_err());
        assert!(ModalitySchema::new([("a", 0)], 1).is_err());
        assert!(ModalitySchema::new(Vec::<(&str, usize)>::new(), 1).is_err());
        let s = ModalitySchema::new([("a", 2), ("b", 1)], 1).unwrap();
        assert_eq!(s.ranges(), vec![0..2, 2..3]);
        assert_eq!(s.permuted(&[1, 0]).unwrap().names(), vec!["b", "a"]);
        assert!(s.permuted(&[0, 0]).is_err());
    }
}
