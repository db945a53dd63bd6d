//! Masked imitation learning: choose which observation modalities a
//! behavior-cloning policy may see by coordinate descent over a binary mask,
//! scoring each candidate mask with a held-out validation loss.

pub mod baselines;
pub mod bilevel;
pub mod datasets;
pub mod diffnet;
pub mod dynamics;
pub mod envbench;
pub mod experiment;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod policy;
pub mod seed;
pub mod training;

pub use datasets::{DemoDataset, NormStats, Role, StepBatch, Trajectory};
pub use diffnet::{Activation, AdamConfig, NetParams};
pub use error::{MilError, Result};
pub use policy::{ActionPolicy, MaskVector, ModalitySchema, PolicyConfig, PolicyParams};
