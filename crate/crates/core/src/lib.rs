//! Deterministic desk-scale simulator of uncertainty-minimizing personalized
//! federated semi-supervised learning.
//!
//! Partial-labeled clients keep personalized models, select data-related
//! helper peers via an MC-dropout epistemic-uncertainty score, pseudo-label
//! local unlabeled data with the most confident helper, aggregate helper
//! models by relation weight, and train locally. Every model transfer is
//! counted in a ledger and checked against the analytic communication-cost
//! model.
//!
//! Everything is seeded: a run with the same configuration and seed produces
//! byte-identical reports, including under the parallel client schedule.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod ledger;
pub mod metrics;
pub mod nn;
pub mod protocol;
pub mod rng;
pub mod uncertainty;

pub use config::{DatasetConfig, ExperimentConfig, Method};
pub use data::{ClientDataset, ClientPartition, Dataset, LabeledExample, PartitionSpec};
pub use error::{Error, Result};
pub use federation::{
    ClientState, HelperEntry, HelperList, PseudoLabel, ServerPool, TrainSettings, TrainingMode,
};
pub use ledger::{CostLedger, CostModelParams, Rational, ReconcileReport};
pub use metrics::{ReportContext, RoundMetrics, Split};
pub use nn::{
    Activation, ForwardMode, LossKind, ModelParams, NetSpec, OptimState, Target, TrainExample,
};
pub use protocol::{
    BaselineKind, EventKind, ExperimentTrace, ProtocolSettings, RoundConfig, RoundEvent,
    SelectionPolicy,
};
pub use uncertainty::{AblationMode, CorrScore, PredictiveDistribution};
