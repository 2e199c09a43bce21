use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, SgdConfig};
use crate::supernet::RescaleRule;

/// Order of weight and architecture steps inside a local epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interleave {
    /// Alternate one weight batch and one validation batch.
    PerBatch,
    /// All weight steps of the epoch, then all architecture steps.
    #[default]
    PerEpoch,
}

/// Which devices take part in a round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum OnlinePolicy {
    #[default]
    All,
    /// `max(1, round(f · K))` devices, uniformly without replacement.
    Fraction { fraction: f64 },
    /// Exactly `m` devices, uniformly without replacement.
    Fixed { m: usize },
}

/// Hyperparameters of a federated search (and, with `search_arch` off, of
/// plain federated weight training).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Communication rounds `T`; also the horizon of the cosine schedule.
    pub rounds: usize,
    /// Local epochs `E` per round.
    pub local_epochs: usize,
    pub batch_size: usize,
    pub weight_lr: f64,
    pub momentum: f64,
    /// Coupled L2 decay on weights; equals `2 · λ1` of the regularized loss.
    pub weight_decay: f64,
    pub arch: AdamConfig,
    pub lambda2: f64,
    pub interleave: Interleave,
    pub rescale: RescaleRule,
    pub online: OnlinePolicy,
    /// Run architecture steps on validation batches.
    pub search_arch: bool,
    pub workers: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            rounds: 30,
            local_epochs: 5,
            batch_size: 16,
            weight_lr: 0.05,
            momentum: 0.9,
            weight_decay: 3e-4,
            arch: AdamConfig { lr: 0.05, beta1: 0.0, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 },
            lambda2: 0.0,
            interleave: Interleave::PerEpoch,
            rescale: RescaleRule::PairMass,
            online: OnlinePolicy::All,
            search_arch: true,
            workers: 1,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig { lr: self.weight_lr, momentum: self.momentum, weight_decay: self.weight_decay }
    }

    pub fn lambda1(&self) -> f64 {
        self.weight_decay / 2.0
    }
}
