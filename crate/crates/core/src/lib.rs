//! Inference for moment inequality models with generalized and
//! constrained-tilting moment selection.

pub mod critical_values;
pub mod el_tilt;
pub mod error;
pub mod mc_harness;
pub mod moment_model;
pub mod rng;
pub mod selection;
mod serde_inf;
pub mod test_statistics;

pub use critical_values::{CriticalValueReport, Method, Mode, TestConfig, TestContext, TestDecision};
pub use error::{Error, Result};
pub use mc_harness::{ExperimentConfig, ExperimentResult};
pub use moment_model::{CorrelationFamily, FamilyKind, MomentSample, MomentSummary};
pub use selection::{KappaSchedule, SelectionRule, SelectionVector};
pub use test_statistics::StatisticKind;
