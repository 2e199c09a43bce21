use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::aggregate::{aggregate, sample_online, Update};
use super::checkpoint::Checkpoint;
use super::config::SearchConfig;
use super::device::{device_update, DeviceState, DeviceStats};
use crate::data::{Dataset, DevicePartition};
use crate::error::{Error, Result};
use crate::latency::LatencyTable;
use crate::rng::substream;
use crate::supernet::{SearchSpace, SuperNet};

/// Metrics of one communication round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// 1-based index of the round.
    pub round: usize,
    /// Devices whose updates were aggregated, in id order.
    pub participants: Vec<usize>,
    /// Sampled devices whose update failed (non-finite loss).
    pub failed: Vec<usize>,
    pub sizes: Vec<usize>,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// `Σ N_k` over `participants`.
    pub normalizer: usize,
    /// Expected latency of the aggregated supernet, in milliseconds.
    pub expected_latency_ms: f64,
    /// Size-weighted validation loss plus `λ2` times the expected latency.
    pub reg_loss: f64,
    pub wall_time_s: f64,
}

impl RoundReport {
    /// The report with timing zeroed, for comparisons across runs.
    pub fn without_timing(&self) -> RoundReport {
        RoundReport { wall_time_s: 0.0, ..self.clone() }
    }

    pub fn weighted_train_loss(&self) -> f64 {
        weighted(&self.train_loss, &self.sizes)
    }

    pub fn weighted_val_loss(&self) -> f64 {
        weighted(&self.val_loss, &self.sizes)
    }
}

fn weighted(values: &[f64], sizes: &[usize]) -> f64 {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return 0.0;
    }
    values.iter().zip(sizes).map(|(v, s)| v * *s as f64).sum::<f64>() / n as f64
}

/// Server side: the global supernet, the completed round count and history.
#[derive(Clone, Debug)]
pub struct ServerState {
    pub net: SuperNet,
    pub round: usize,
    pub history: Vec<RoundReport>,
}

/// A federated search in progress: server plus device replicas.
pub struct FederatedSearch<'a> {
    pub config: SearchConfig,
    pub server: ServerState,
    pub devices: Vec<DeviceState>,
    data: &'a Dataset,
    table: &'a LatencyTable,
    pool: rayon::ThreadPool,
}

impl<'a> FederatedSearch<'a> {
    /// Every device starts from a copy of `init`.
    pub fn new(
        config: SearchConfig,
        data: &'a Dataset,
        table: &'a LatencyTable,
        init: SuperNet,
        partitions: &[DevicePartition],
        hardware_tags: &[Option<String>],
    ) -> Result<Self> {
        if partitions.is_empty() {
            return Err(Error::Invalid("a federated search needs at least one device".into()));
        }
        if hardware_tags.len() != partitions.len() {
            return Err(Error::Invalid(format!(
                "{} hardware tags for {} devices",
                hardware_tags.len(),
                partitions.len()
            )));
        }
        if config.local_epochs == 0 || config.batch_size == 0 {
            return Err(Error::Invalid("local_epochs and batch_size must be positive".into()));
        }
        table.validate(&init.space)?;
        let devices = partitions
            .iter()
            .zip(hardware_tags)
            .map(|(p, t)| DeviceState::new(p.clone(), t.clone(), init.clone(), &config))
            .collect::<Result<Vec<_>>>()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers.max(1))
            .build()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
        Ok(FederatedSearch {
            config,
            server: ServerState { net: init, round: 0, history: Vec::new() },
            devices,
            data,
            table,
            pool,
        })
    }

    pub fn is_done(&self) -> bool {
        self.server.round >= self.config.rounds
    }

    /// Samples participants, runs their local updates concurrently and
    /// aggregates the successful ones.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let t = self.server.round;
        if self.is_done() {
            return Err(Error::Invalid(format!("all {} rounds already completed", self.config.rounds)));
        }
        let start = Instant::now();
        let ids: Vec<usize> = self.devices.iter().map(|d| d.device_id).collect();
        let online = sample_online(&ids, self.config.online, &mut substream(self.config.seed, "online", &[t as u64]))?;

        let global = &self.server.net.params;
        let (data, table, cfg) = (self.data, self.table, &self.config);
        let results: Vec<(usize, Result<DeviceStats>)> = self.pool.install(|| {
            self.devices
                .par_iter_mut()
                .filter(|d| online.binary_search(&d.device_id).is_ok())
                .map(|d| (d.device_id, device_update(global, d, data, table, cfg, t)))
                .collect()
        });

        let mut stats = Vec::new();
        let mut failed = Vec::new();
        for (id, r) in results {
            match r {
                Ok(s) => stats.push(s),
                Err(Error::NonFinite { context }) => {
                    log::warn!("round {}: device {id} dropped ({context})", t + 1);
                    failed.push(id);
                }
                Err(e) => return Err(e),
            }
        }
        for id in &failed {
            let d = self.devices.iter_mut().find(|d| d.device_id == *id).expect("known device");
            d.reset_optimizers();
        }
        if stats.is_empty() {
            return Err(Error::RoundAborted { round: t + 1 });
        }

        let updates: Vec<Update> = stats
            .iter()
            .map(|s| {
                let d = self.devices.iter().find(|d| d.device_id == s.device_id).expect("known device");
                Update { device_id: d.device_id, params: &d.net.params, num_samples: s.num_samples }
            })
            .collect();
        let (merged, normalizer) = aggregate(&updates)?;
        self.server.net.params.copy_from(&merged)?;
        self.server.round += 1;

        let expected_latency_ms = self.server.net.expected_latency(self.table)?;
        let sizes: Vec<usize> = stats.iter().map(|s| s.num_samples).collect();
        let val_loss: Vec<f64> = stats.iter().map(|s| s.val_loss).collect();
        let report = RoundReport {
            round: self.server.round,
            participants: stats.iter().map(|s| s.device_id).collect(),
            failed,
            train_loss: stats.iter().map(|s| s.train_loss).collect(),
            reg_loss: weighted(&val_loss, &sizes) + self.config.lambda2 * expected_latency_ms,
            val_loss,
            sizes,
            normalizer,
            expected_latency_ms,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        self.server.history.push(report.clone());
        Ok(report)
    }

    /// Runs rounds until `stop_after` rounds are complete (or the configured
    /// total), passing each report to `on_round`.
    pub fn run_until(&mut self, stop_after: usize, mut on_round: impl FnMut(&RoundReport) -> Result<()>) -> Result<()> {
        while self.server.round < stop_after.min(self.config.rounds) {
            let r = self.run_round()?;
            on_round(&r)?;
        }
        Ok(())
    }

    /// Global parameters plus every device's optimizer buffers.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut extra = BTreeMap::new();
        for d in &self.devices {
            for (name, v) in d.weight_opt.export() {
                extra.insert(format!("opt/{}/w/{name}", d.device_id), v);
            }
            for (name, v) in d.arch_opt.export() {
                extra.insert(format!("opt/{}/a/{name}", d.device_id), v);
            }
        }
        Checkpoint {
            round: self.server.round,
            space_hash: self.server.net.space.hash(),
            params: self.server.net.params.clone(),
            extra,
        }
    }

    /// Loads global parameters and the round counter from `ckpt`.
    pub fn restore_params(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.check_space(&self.server.net.space.hash())?;
        self.server.net.params.copy_from(&ckpt.params)?;
        self.server.round = ckpt.round;
        Ok(())
    }

    /// Loads each device's optimizer buffers from `ckpt` (devices absent from
    /// the checkpoint start fresh).
    pub fn restore_optimizers(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for d in &mut self.devices {
            let collect = |tag: &str| -> BTreeMap<String, Vec<f64>> {
                let prefix = format!("opt/{}/{tag}/", d.device_id);
                ckpt.extra
                    .iter()
                    .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|rest| (rest.to_string(), v.clone())))
                    .collect()
            };
            let (w, a) = (collect("w"), collect("a"));
            d.weight_opt.import(&w)?;
            d.arch_opt.import(&a)?;
        }
        Ok(())
    }

    /// Full resume: parameters, round counter and optimizer state.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.round > self.config.rounds {
            return Err(Error::Invalid(format!(
                "checkpoint is at round {} but only {} rounds are configured",
                ckpt.round, self.config.rounds
            )));
        }
        self.restore_params(ckpt)?;
        self.restore_optimizers(ckpt)
    }
}

/// Runs a complete federated search from a fresh supernet seeded by
/// `config.seed`.
pub fn run_fdnas(
    config: &SearchConfig,
    space: &SearchSpace,
    data: &Dataset,
    table: &LatencyTable,
    partitions: &[DevicePartition],
    hardware_tags: &[Option<String>],
) -> Result<ServerState> {
    let init = SuperNet::new(space.clone(), config.seed)?;
    let mut search = FederatedSearch::new(config.clone(), data, table, init, partitions, hardware_tags)?;
    search.run_until(config.rounds, |_| Ok(()))?;
    Ok(search.server)
}
