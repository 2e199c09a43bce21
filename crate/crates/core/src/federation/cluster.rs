use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::SearchConfig;
use super::search::{FederatedSearch, RoundReport};
use crate::data::{Dataset, DevicePartition};
use crate::error::{Error, Result};
use crate::latency::LatencyTable;
use crate::rng::substream;
use crate::supernet::{derive_normal_net, DerivedArchitecture, SearchSpace, SuperNet};
use rand::RngCore;

/// Which device tag defines a cluster.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterKey {
    /// The data tag from partitioning.
    Data,
    #[default]
    Hardware,
}

impl std::str::FromStr for ClusterKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "data" => Ok(ClusterKey::Data),
            "hardware" => Ok(ClusterKey::Hardware),
            other => Err(Error::Invalid(format!("unknown cluster key `{other}` (expected data or hardware)"))),
        }
    }
}

/// Groups device ids by tag. Every device must carry a tag.
pub fn cluster_by_tag(tags: &[(usize, Option<String>)]) -> Result<BTreeMap<String, Vec<usize>>> {
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (device, tag) in tags {
        let tag = tag.as_ref().ok_or(Error::MissingTag { device: *device })?;
        out.entry(tag.clone()).or_default().push(*device);
    }
    for ids in out.values_mut() {
        ids.sort_unstable();
        ids.dedup();
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    pub tag: String,
    pub devices: Vec<usize>,
    pub lambda2: f64,
    pub table: LatencyTable,
}

/// Disjoint device clusters, each with its own latency pressure and table.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterPlan {
    pub clusters: Vec<Cluster>,
}

impl ClusterPlan {
    /// Clusters from tags; `settings` maps a tag to its `(λ2, table)`.
    pub fn from_tags(
        tags: &[(usize, Option<String>)],
        mut settings: impl FnMut(&str) -> Result<(f64, LatencyTable)>,
    ) -> Result<Self> {
        let groups = cluster_by_tag(tags)?;
        let mut clusters = Vec::with_capacity(groups.len());
        for (tag, devices) in groups {
            let (lambda2, table) = settings(&tag)?;
            clusters.push(Cluster { tag, devices, lambda2, table });
        }
        Ok(ClusterPlan { clusters })
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.clusters {
            for d in &c.devices {
                if !seen.insert(*d) {
                    return Err(Error::Invalid(format!("device {d} is in more than one cluster")));
                }
            }
        }
        Ok(())
    }
}

/// Result of adapting the supernet to one cluster.
#[derive(Clone, Debug)]
pub struct ClusterOutcome {
    pub tag: String,
    pub devices: Vec<usize>,
    pub checkpoint: Checkpoint,
    pub architecture: DerivedArchitecture,
    pub history: Vec<RoundReport>,
}

/// Root seed of a cluster's run: depends only on the base seed and the tag.
pub fn cluster_seed(seed: u64, tag: &str) -> u64 {
    substream(seed, &format!("cluster:{tag}"), &[]).next_u64()
}

/// Inputs shared by every cluster run.
pub struct ClusterInputs<'a> {
    pub space: &'a SearchSpace,
    pub data: &'a Dataset,
    pub partitions: &'a [DevicePartition],
    pub hardware_tags: &'a [Option<String>],
}

/// Adapts the supernet in `start` separately for every cluster: a federated
/// search over the cluster's devices for `rounds` rounds with the cluster's
/// `λ2` and table, then derivation. Optimizer buffers start fresh unless
/// `reset_optimizers` is false, in which case they are taken from `start`.
///
/// Each cluster reads only `start`, its own settings and its own devices.
pub fn run_cfdnas(
    start: &Checkpoint,
    plan: &ClusterPlan,
    rounds: usize,
    base: &SearchConfig,
    inputs: &ClusterInputs<'_>,
    reset_optimizers: bool,
) -> Result<Vec<ClusterOutcome>> {
    run_cfdnas_observed(start, plan, rounds, base, inputs, reset_optimizers, |_, _, _| Ok(()))
}

/// [`run_cfdnas`] that also shows every cluster's aggregated supernet to
/// `on_round` after each round, together with the cluster tag and report.
pub fn run_cfdnas_observed(
    start: &Checkpoint,
    plan: &ClusterPlan,
    rounds: usize,
    base: &SearchConfig,
    inputs: &ClusterInputs<'_>,
    reset_optimizers: bool,
    mut on_round: impl FnMut(&str, &RoundReport, &SuperNet) -> Result<()>,
) -> Result<Vec<ClusterOutcome>> {
    plan.validate()?;
    start.check_space(&inputs.space.hash())?;
    let mut out = Vec::with_capacity(plan.clusters.len());
    for cluster in &plan.clusters {
        if cluster.devices.is_empty() {
            log::warn!("cluster `{}` has no devices; skipped", cluster.tag);
            continue;
        }
        let observe = |r: &RoundReport, net: &SuperNet| on_round(&cluster.tag, r, net);
        out.push(run_cluster_observed(start, cluster, rounds, base, inputs, reset_optimizers, observe)?);
    }
    Ok(out)
}

/// One cluster of [`run_cfdnas`].
pub fn run_cluster(
    start: &Checkpoint,
    cluster: &Cluster,
    rounds: usize,
    base: &SearchConfig,
    inputs: &ClusterInputs<'_>,
    reset_optimizers: bool,
) -> Result<ClusterOutcome> {
    run_cluster_observed(start, cluster, rounds, base, inputs, reset_optimizers, |_, _| Ok(()))
}

fn run_cluster_observed(
    start: &Checkpoint,
    cluster: &Cluster,
    rounds: usize,
    base: &SearchConfig,
    inputs: &ClusterInputs<'_>,
    reset_optimizers: bool,
    mut on_round: impl FnMut(&RoundReport, &SuperNet) -> Result<()>,
) -> Result<ClusterOutcome> {
    let mut parts = Vec::with_capacity(cluster.devices.len());
    let mut tags = Vec::with_capacity(cluster.devices.len());
    for &d in &cluster.devices {
        let pos = inputs
            .partitions
            .iter()
            .position(|p| p.device_id == d)
            .ok_or_else(|| Error::Invalid(format!("cluster `{}` names unknown device {d}", cluster.tag)))?;
        parts.push(inputs.partitions[pos].clone());
        tags.push(inputs.hardware_tags.get(pos).cloned().flatten());
    }
    let cfg =
        SearchConfig { rounds, lambda2: cluster.lambda2, seed: cluster_seed(base.seed, &cluster.tag), ..base.clone() };
    let mut net = SuperNet::new(inputs.space.clone(), base.seed)?;
    net.params.copy_from(&start.params)?;
    let start_id = start.id();
    if rounds == 0 {
        let architecture = derive_normal_net(&net, &start_id)?;
        let checkpoint = Checkpoint { round: 0, extra: BTreeMap::new(), ..start.clone() };
        return Ok(ClusterOutcome {
            tag: cluster.tag.clone(),
            devices: cluster.devices.clone(),
            checkpoint,
            architecture,
            history: Vec::new(),
        });
    }
    let mut search = FederatedSearch::new(cfg, inputs.data, &cluster.table, net, &parts, &tags)?;
    if !reset_optimizers {
        search.restore_optimizers(start)?;
    }
    for r in 1..=rounds {
        search.run_until(r, |_| Ok(()))?;
        let report = search.server.history.last().expect("a round was run");
        on_round(report, &search.server.net)?;
    }
    let checkpoint = search.checkpoint();
    let architecture = derive_normal_net(&search.server.net, &checkpoint.id())?;
    Ok(ClusterOutcome {
        tag: cluster.tag.clone(),
        devices: cluster.devices.clone(),
        checkpoint,
        architecture,
        history: search.server.history,
    })
}
