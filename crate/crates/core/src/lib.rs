//! Racial-bias mitigation pipeline at desk scale: synthetic multi-group
//! identity data, cycle-consistent adversarial translation between group
//! domains, per-subject augmentation, margin-based recognition losses, and
//! per-group verification fairness reports.

pub mod augment;
pub mod cycletrans;
pub mod error;
pub mod faireval;
pub mod numgrad;
pub mod reclosses;
pub mod seed;
pub mod synthface;

pub use error::{Error, Result};
pub use numgrad::{AdamConfig, ParamSet, Tape, Tensor, Var};
pub use synthface::{DomainDataset, GroupLabel, Provenance, Sample};
