//! Demonstration datasets, normalization statistics, and the line-delimited
//! file format.
//!
//! File layout (UTF-8, one JSON document per line):
//!
//! ```text
//! {"format":"mil-dataset/1","schema":{..},"role":"train","normalization":null,"note":null,"num_trajectories":N}
//! {"states":[[..],..],"actions":[[..],..]}
//! {"states":[[..],..],"actions":[[..],..],"success":false,"provenance":{"alpha":0.05,"seed":7,"source_index":3}}
//! ```
//!
//! States are flat vectors laid out in schema order. Floats are written in
//! shortest round-trip form, so load(save(ds)) is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape_err, usage_err, MilError, Result};
use crate::policy::ModalitySchema;

pub const DATASET_FORMAT: &str = "mil-dataset/1";
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Val,
    Test,
    Augmented,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
            Role::Augmented => "augmented",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Role {
    type Err = MilError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Role::Train),
            "val" => Ok(Role::Val),
            "test" => Ok(Role::Test),
            "augmented" => Ok(Role::Augmented),
            other => Err(usage_err!("unknown role {other:?}; expected train, val, test or augmented")),
        }
    }
}

/// Where an augmented trajectory came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub alpha: f64,
    pub seed: u64,
    pub source_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl Trajectory {
    pub fn new(states: Vec<Vec<f64>>, actions: Vec<Vec<f64>>) -> Self {
        Self {
            states,
            actions,
            success: None,
            provenance: None,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn validate(&self, schema: &ModalitySchema) -> Result<()> {
        if self.states.is_empty() {
            return Err(MilError::Schema("trajectory has no steps".into()));
        }
        if self.states.len() != self.actions.len() {
            return Err(MilError::Schema(format!(
                "{} states but {} actions",
                self.states.len(),
                self.actions.len()
            )));
        }
        let sd = schema.state_dim();
        for (t, (s, a)) in self.states.iter().zip(&self.actions).enumerate() {
            if s.len() != sd {
                return Err(MilError::Schema(format!("step {t}: state width {} vs schema {sd}", s.len())));
            }
            if a.len() != schema.action_dim() {
                return Err(MilError::Schema(format!(
                    "step {t}: action width {} vs schema {}",
                    a.len(),
                    schema.action_dim()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoDataset {
    pub schema: ModalitySchema,
    pub role: Role,
    pub trajectories: Vec<Trajectory>,
    /// Fingerprint of the [`NormStats`] applied to the states, if any.
    pub normalization: Option<String>,
    pub note: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    schema: ModalitySchema,
    role: Role,
    normalization: Option<String>,
    note: Option<String>,
    num_trajectories: usize,
}

impl DemoDataset {
    pub fn new(schema: ModalitySchema, role: Role, trajectories: Vec<Trajectory>) -> Result<Self> {
        schema.validate()?;
        for (i, t) in trajectories.iter().enumerate() {
            t.validate(&schema)
                .map_err(|e| MilError::Schema(format!("trajectory {i}: {e}")))?;
        }
        Ok(Self {
            schema,
            role,
            trajectories,
            normalization: None,
            note: None,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn num_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn num_transitions(&self) -> usize {
        self.trajectories.iter().map(|t| t.len().saturating_sub(1)).sum()
    }

    /// Stable content hash of schema, normalization tag, and trajectories.
    /// The role tag and note are not part of the content.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(DATASET_FORMAT.as_bytes());
        h.update(serde_json::to_vec(&self.schema).expect("schema serializes"));
        h.update(serde_json::to_vec(&self.normalization).expect("tag serializes"));
        for t in &self.trajectories {
            h.update(b"\n");
            h.update(serde_json::to_vec(t).expect("trajectory serializes"));
        }
        hex(&h.finalize()[..16])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| MilError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = Header {
            format: DATASET_FORMAT.into(),
            schema: self.schema.clone(),
            role: self.role,
            normalization: self.normalization.clone(),
            note: self.note.clone(),
            num_trajectories: self.trajectories.len(),
        };
        let io = |e| MilError::io(path, e);
        serde_json::to_writer(&mut w, &header).map_err(|e| MilError::Serde(e.to_string()))?;
        w.write_all(b"\n").map_err(io)?;
        for t in &self.trajectories {
            serde_json::to_writer(&mut w, t).map_err(|e| MilError::Serde(e.to_string()))?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| MilError::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = match lines.next() {
            None => return Err(usage_err!("{} is empty; expected a dataset header", path.display())),
            Some(l) => l.map_err(|e| MilError::io(path, e))?,
        };
        if first.trim().is_empty() {
            return Err(usage_err!("{} is empty; expected a dataset header", path.display()));
        }
        let header: Header = serde_json::from_str(&first).map_err(|e| MilError::Parse {
            line: 1,
            message: format!("bad header: {e}"),
        })?;
        if header.format != DATASET_FORMAT {
            return Err(MilError::Parse {
                line: 1,
                message: format!("unsupported format {:?}", header.format),
            });
        }
        header.schema.validate()?;
        let mut trajectories = Vec::with_capacity(header.num_trajectories);
        for (k, line) in lines.enumerate() {
            let line_no = k + 2;
            let line = line.map_err(|e| MilError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let index = trajectories.len();
            let t: Trajectory = serde_json::from_str(&line).map_err(|e| MilError::Parse {
                line: line_no,
                message: format!("trajectory {index}: {e}"),
            })?;
            t.validate(&header.schema).map_err(|e| MilError::Parse {
                line: line_no,
                message: format!("trajectory {index}: {e}"),
            })?;
            trajectories.push(t);
        }
        if trajectories.len() != header.num_trajectories {
            return Err(MilError::Parse {
                line: trajectories.len() + 1,
                message: format!(
                    "header announces {} trajectories, found {}",
                    header.num_trajectories,
                    trajectories.len()
                ),
            });
        }
        Ok(Self {
            schema: header.schema,
            role: header.role,
            trajectories,
            normalization: header.normalization,
            note: header.note,
        })
    }

    /// Concatenation of `self` and `other`; keeps `self`'s role.
    pub fn merge(&self, other: &DemoDataset) -> Result<DemoDataset> {
        if self.schema != other.schema {
            return Err(MilError::Schema("cannot merge datasets with different schemas".into()));
        }
        if self.normalization != other.normalization {
            return Err(MilError::Schema(
                "cannot merge datasets normalized with different statistics".into(),
            ));
        }
        let mut trajectories = self.trajectories.clone();
        trajectories.extend(other.trajectories.iter().cloned());
        Ok(DemoDataset {
            schema: self.schema.clone(),
            role: self.role,
            trajectories,
            normalization: self.normalization.clone(),
            note: Some(format!("merged {} + {} ({})", self.role, other.role, other.len())),
        })
    }

    pub fn step_batch(&self) -> StepBatch {
        let n = self.num_steps();
        let sd = self.schema.state_dim();
        let ad = self.schema.action_dim();
        let mut states = Vec::with_capacity(n * sd);
        let mut actions = Vec::with_capacity(n * ad);
        for t in &self.trajectories {
            for (s, a) in t.states.iter().zip(&t.actions) {
                states.extend_from_slice(s);
                actions.extend_from_slice(a);
            }
        }
        StepBatch {
            states: Array2::from_shape_vec((n, sd), states).expect("validated widths"),
            actions: Array2::from_shape_vec((n, ad), actions).expect("validated widths"),
        }
    }

    /// `(state ++ action) -> next state` pairs from consecutive steps.
    pub fn transition_batch(&self) -> StepBatch {
        let n = self.num_transitions();
        let sd = self.schema.state_dim();
        let ad = self.schema.action_dim();
        let mut inputs = Vec::with_capacity(n * (sd + ad));
        let mut targets = Vec::with_capacity(n * sd);
        for t in &self.trajectories {
            for k in 0..t.len().saturating_sub(1) {
                inputs.extend_from_slice(&t.states[k]);
                inputs.extend_from_slice(&t.actions[k]);
                targets.extend_from_slice(&t.states[k + 1]);
            }
        }
        StepBatch {
            states: Array2::from_shape_vec((n, sd + ad), inputs).expect("validated widths"),
            actions: Array2::from_shape_vec((n, sd), targets).expect("validated widths"),
        }
    }

    pub fn normalized(&self, stats: &NormStats) -> Result<DemoDataset> {
        if self.normalization.is_some() {
            return Err(usage_err!("dataset is already normalized"));
        }
        stats.check_schema(&self.schema)?;
        let trajectories = self
            .trajectories
            .iter()
            .map(|t| Trajectory {
                states: t.states.iter().map(|s| stats.normalize(s)).collect(),
                actions: t.actions.clone(),
                success: t.success,
                provenance: t.provenance.clone(),
            })
            .collect();
        Ok(DemoDataset {
            schema: self.schema.clone(),
            role: self.role,
            trajectories,
            normalization: Some(stats.fingerprint()),
            note: self.note.clone(),
        })
    }
}

/// Rows of states (or model inputs) paired with rows of targets.
#[derive(Debug, Clone, PartialEq)]
pub struct StepBatch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
}

impl StepBatch {
    pub fn new(states: Array2<f64>, actions: Array2<f64>) -> Result<Self> {
        if states.nrows() != actions.nrows() {
            return Err(shape_err!("{} state rows vs {} action rows", states.nrows(), actions.nrows()));
        }
        Ok(Self { states, actions })
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    pub fn select(&self, rows: &[usize]) -> StepBatch {
        StepBatch {
            states: self.states.select(ndarray::Axis(0), rows),
            actions: self.actions.select(ndarray::Axis(0), rows),
        }
    }
}

/// Per-dimension z-score statistics, grouped by modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub modality_names: Vec<String>,
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
    pub source_fingerprint: String,
}

impl NormStats {
    /// Population mean and standard deviation over every step of `ds`, with
    /// standard deviations floored at [`STD_FLOOR`].
    pub fn compute(ds: &DemoDataset) -> Result<Self> {
        if ds.num_steps() == 0 {
            return Err(usage_err!("cannot compute statistics of an empty dataset"));
        }
        if ds.normalization.is_some() {
            return Err(usage_err!("statistics must come from raw data"));
        }
        let batch = ds.step_batch();
        let n = batch.states.nrows() as f64;
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for r in ds.schema.ranges() {
            let mut m = Vec::with_capacity(r.len());
            let mut s = Vec::with_capacity(r.len());
            for c in r {
                let col = batch.states.column(c);
                let mu = col.iter().sum::<f64>() / n;
                let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                m.push(mu);
                s.push(var.sqrt().max(STD_FLOOR));
            }
            mean.push(m);
            std.push(s);
        }
        Ok(Self {
            modality_names: ds.schema.names().iter().map(|s| s.to_string()).collect(),
            mean,
            std,
            source_fingerprint: ds.fingerprint(),
        })
    }

    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("stats serialize");
        hex(&Sha256::digest(&bytes)[..16])
    }

    fn flat(&self) -> (Vec<f64>, Vec<f64>) {
        (self.mean.concat(), self.std.concat())
    }

    pub fn check_schema(&self, schema: &ModalitySchema) -> Result<()> {
        let names = schema.names();
        let dims_ok = self
            .mean
            .iter()
            .zip(schema.modalities())
            .all(|(m, s)| m.len() == s.dim);
        if names != self.modality_names.iter().map(String::as_str).collect::<Vec<_>>() || !dims_ok {
            return Err(MilError::Schema("normalization statistics do not match the schema".into()));
        }
        Ok(())
    }

    pub fn normalize(&self, state: &[f64]) -> Vec<f64> {
        let (mean, std) = self.flat();
        state
            .iter()
            .zip(mean.iter().zip(&std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn denormalize(&self, state: &[f64]) -> Vec<f64> {
        let (mean, std) = self.flat();
        state
            .iter()
            .zip(mean.iter().zip(&std))
            .map(|(z, (m, s))| z * s + m)
            .collect()
    }

    pub fn normalize_row(&self, row: ArrayView1<'_, f64>) -> Vec<f64> {
        self.normalize(row.as_slice().unwrap_or(&row.to_vec()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| MilError::Serde(e.to_string()))?;
        fs::write(path, text).map_err(|e| MilError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MilError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| MilError::Serde(e.to_string()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn role_names_round_trip() {
        for role in [Role::Train, Role::Val, Role::Test, Role::Augmented] {
            assert_eq!(role.to_string().parse::<Role>().unwrap(), role);
        }
        assert!("validation".parse::<Role>().is_err());
    }

    fn schema() -> ModalitySchema {
        ModalitySchema::new([("x", 1), ("y", 2)], 1).unwrap()
    }

    fn traj(v: f64, n: usize) -> Trajectory {
        Trajectory::new(
            (0..n).map(|t| vec![v + t as f64, 0.5, -v]).collect(),
            (0..n).map(|t| vec![t as f64 * 0.1]).collect(),
        )
    }

    fn ds(vals: &[f64]) -> DemoDataset {
        DemoDataset::new(schema(), Role::Train, vals.iter().map(|&v| traj(v, 3)).collect()).unwrap()
    }

    #[test]
    fn norm_stats_hand_values() {
        let s = ModalitySchema::new([("f", 1), ("c", 1)], 1).unwrap();
        let d = DemoDataset::new(
            s,
            Role::Train,
            vec![Trajectory::new(vec![vec![0.0, 3.0], vec![2.0, 3.0]], vec![vec![0.0], vec![0.0]])],
        )
        .unwrap();
        let st = NormStats::compute(&d).unwrap();
        assert_eq!(st.mean, vec![vec![1.0], vec![3.0]]);
        assert_eq!(st.std, vec![vec![1.0], vec![STD_FLOOR]]);
        assert_eq!(st.normalize(&[0.0, 3.0]), vec![-1.0, 0.0]);
        assert_eq!(st.normalize(&[2.0, 3.0]), vec![1.0, 0.0]);
        let x = [0.123_456, 3.0];
        let back = st.denormalize(&st.normalize(&x));
        assert!(back.iter().zip(x).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn merge_properties() {
        let a = ds(&[1.0, 2.0]);
        let b = ds(&[3.0]);
        let empty = DemoDataset::new(schema(), Role::Val, vec![]).unwrap();
        let ae = a.merge(&empty).unwrap();
        assert_eq!(ae.trajectories, a.trajectories);
        assert_eq!(ae.fingerprint(), a.fingerprint());
        let ab = a.merge(&b).unwrap();
        assert_eq!(ab.len(), 3);
        assert_eq!(ab.role, Role::Train);
        assert_ne!(ab.fingerprint(), a.fingerprint());
        let other = DemoDataset::new(ModalitySchema::new([("x", 3)], 1).unwrap(), Role::Val, vec![]).unwrap();
        assert!(matches!(a.merge(&other), Err(MilError::Schema(_))));
    }

    #[test]
    fn round_trip_preserves_fingerprint() {
        let mut d = ds(&[0.1, 1.0 / 3.0]);
        d.trajectories[1].success = Some(false);
        d.trajectories[1].provenance = Some(Provenance {
            alpha: 0.05,
            seed: 9,
            source_index: 1,
        });
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        d.save(&p).unwrap();
        let back = DemoDataset::load(&p).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.fingerprint(), d.fingerprint());
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        fs::write(&p, "").unwrap();
        assert!(matches!(DemoDataset::load(&p), Err(MilError::Usage(_))));

        let d = ds(&[1.0, 2.0]);
        let p = dir.path().join("bad.jsonl");
        d.save(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[2] = r#"{"states":[[1.0,2.0]],"actions":[[0.0]]}"#.into();
        fs::write(&p, lines.join("\n")).unwrap();
        match DemoDataset::load(&p) {
            Err(MilError::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("trajectory 1"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn transitions_pair_consecutive_steps() {
        let d = ds(&[0.0]);
        let tb = d.transition_batch();
        assert_eq!(tb.states.dim(), (2, 4));
        assert_eq!(tb.actions.row(0).to_vec(), d.trajectories[0].states[1]);
    }
}
