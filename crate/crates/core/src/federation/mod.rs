//! The federated protocol: local device updates, size-weighted aggregation,
//! search rounds with straggler sampling, per-cluster adaptation, plain
//! federated fine-tuning, evaluation and checkpoints.

mod aggregate;
mod checkpoint;
mod cluster;
mod config;
mod device;
mod finetune;
mod search;

pub use aggregate::{aggregate, sample_online, Update};
pub use checkpoint::Checkpoint;
pub use cluster::{
    cluster_by_tag, cluster_seed, run_cfdnas, run_cfdnas_observed, run_cluster, Cluster, ClusterInputs, ClusterKey,
    ClusterOutcome, ClusterPlan,
};
pub use config::{Interleave, OnlinePolicy, SearchConfig};
pub use device::{device_update, proxyless_search, DeviceState, DeviceStats};
pub use finetune::{
    accuracy, evaluate, finetune_fedavg, finetune_indices, EvalMode, Evaluation, FinetuneConfig, FinetuneReport,
    LocalTuning,
};
pub use search::{run_fdnas, FederatedSearch, RoundReport, ServerState};
