//! Federated direct neural architecture search at desk scale.
//!
//! Devices holding non-IID data jointly train a gated supernet (weights and
//! architecture parameters) under size-weighted federated averaging, may
//! adapt it per hardware or data cluster with a latency-aware loss, and derive
//! compact per-cluster networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: tensors, a reverse-mode tape, optimizers, gradient checking.
//! - [`supernet`]: mixed layers, binary gates, the architecture gradient,
//!   two-path updates with rescaling, and normal-net derivation.
//! - [`latency`]: multiply-add accounting and latency lookup tables.
//! - [`data`]: synthetic and raw image datasets, non-IID partitioning.
//! - [`federation`]: device updates, aggregation, search rounds, clustering,
//!   fine-tuning, evaluation and checkpoints.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod federation;
pub mod latency;
pub mod rng;
pub mod supernet;

pub use autodiff::{ParamKind, ParamSet, Parameter, Tensor};
pub use data::{Dataset, DevicePartition, PartitionSpec};
pub use error::{Error, Result};
pub use federation::{ClusterPlan, DeviceState, RoundReport, ServerState};
pub use latency::{HardwareProfile, LatencyTable};
pub use supernet::{CandidateKind, DerivedArchitecture, NormalNet, SearchSpace, SuperNet};
