//! Importance-based dataset pruning for simulated edge-learning fleets.
//!
//! Each simulated device scores its local samples by their average loss over a
//! short warm-up, keeps the top `floor(rho * N)` of them, and trains on the
//! retained subset. Alongside the learning pipeline the crate carries an
//! analytic cost model (FLOPs, latency, energy, storage) so that accuracy can
//! be traded against resource use, and baselines (full data, random pruning)
//! run under the same protocol.
//!
//! Module map:
//!
//! - [`model`]: one-hidden-layer MLP with softmax cross-entropy and manual
//!   backpropagation.
//! - [`data`]: synthetic corpora, IID/Dirichlet partitioning, dataset files.
//! - [`pruner`]: warm-up scoring, top-M selection, random baseline.
//! - [`trainer`]: learning-rate schedules, SGD/Adam training, evaluation.
//! - [`cost`]: analytic FLOPs/latency/energy/storage accounting.
//! - [`fleet`]: per-device pipeline, fleet aggregation and rho sweeps.
//! - [`config`]: experiment configuration parsing and run manifests.

pub mod config;
pub mod cost;
pub mod data;
mod error;
pub mod fleet;
pub mod model;
pub mod pruner;
pub mod rng;
pub mod trainer;

pub use config::{ExperimentConfig, RunManifest};
pub use cost::{CostReport, CostWeights, DeviceProfile};
pub use data::{Dataset, DatasetSpec, DeviceDataset, PartitionScheme, PartitionSpec};
pub use error::{Error, Result};
pub use fleet::{DeviceResult, FleetResult, Method};
pub use model::{Gradient, ModelLayout, ModelParams, Pass};
pub use pruner::{ImportanceScores, PruningConfig, SelectionMask, WarmupConfig};
pub use trainer::{Optimizer, Schedule, ScheduleKind, TrainConfig, TrainingTrace};
