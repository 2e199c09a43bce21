use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::substream;

/// Classes owned by a set of devices under label sharding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardGroup {
    pub classes: Vec<usize>,
    pub devices: Vec<usize>,
    /// Data tag given to the group's devices; the group index when absent.
    #[serde(default)]
    pub tag: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionSpec {
    LabelShards {
        groups: Vec<ShardGroup>,
    },
    Dirichlet {
        concentration: f64,
        /// One data tag per device.
        #[serde(default)]
        tags: Option<Vec<String>>,
    },
    Iid,
}

impl PartitionSpec {
    /// The three-group layout used throughout the experiments: classes
    /// {0,1,2}, {3,4,5} and {6..9} each go to the devices with the same ids.
    pub fn three_groups() -> Self {
        PartitionSpec::LabelShards {
            groups: vec![
                ShardGroup { classes: vec![0, 1, 2], devices: vec![0, 1, 2], tag: None },
                ShardGroup { classes: vec![3, 4, 5], devices: vec![3, 4, 5], tag: None },
                ShardGroup { classes: vec![6, 7, 8, 9], devices: vec![6, 7, 8, 9], tag: None },
            ],
        }
    }
}

/// Sample indices held by one device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevicePartition {
    pub device_id: usize,
    pub tag: Option<String>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl DevicePartition {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_indices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.train.iter().chain(&self.val).chain(&self.test).copied().collect();
        v.sort_unstable();
        v
    }
}

fn deal(indices: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let base = indices.len() / parts;
    let extra = indices.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for k in 0..parts {
        let n = base + usize::from(k < extra);
        out.push(indices[start..start + n].to_vec());
        start += n;
    }
    out
}

fn validate_groups(groups: &[ShardGroup], num_devices: usize, num_classes: usize) -> Result<()> {
    let mut devices = BTreeSet::new();
    let mut classes = BTreeSet::new();
    for (g, group) in groups.iter().enumerate() {
        if group.devices.is_empty() {
            return Err(Error::Invalid(format!("label shard group {g} has no devices")));
        }
        for &d in &group.devices {
            if d >= num_devices || !devices.insert(d) {
                return Err(Error::Invalid(format!("device {d} is out of range or in two groups")));
            }
        }
        for &c in &group.classes {
            if c >= num_classes || !classes.insert(c) {
                return Err(Error::Invalid(format!("class {c} is out of range or in two groups")));
            }
        }
    }
    if devices.len() != num_devices {
        return Err(Error::Invalid(format!("groups cover {} of {num_devices} devices", devices.len())));
    }
    if classes.len() != num_classes {
        return Err(Error::Invalid(format!("groups cover {} of {num_classes} classes", classes.len())));
    }
    Ok(())
}

/// Assigns every sample to exactly one device. All indices land in `train`;
/// use [`split_train_val_test`] afterwards.
pub fn partition(data: &Dataset, spec: &PartitionSpec, num_devices: usize, seed: u64) -> Result<Vec<DevicePartition>> {
    if num_devices == 0 {
        return Err(Error::Invalid("need at least one device".into()));
    }
    let mut rng = substream(seed, "partition", &[]);
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); num_devices];
    let mut tags: Vec<Option<String>> = vec![None; num_devices];
    let by_class = |c: usize| -> Vec<usize> { (0..data.len()).filter(|&i| data.labels()[i] == c).collect() };

    match spec {
        PartitionSpec::LabelShards { groups } => {
            validate_groups(groups, num_devices, data.num_classes())?;
            for (g, group) in groups.iter().enumerate() {
                let mut pool: Vec<usize> = group.classes.iter().flat_map(|&c| by_class(c)).collect();
                pool.sort_unstable();
                pool.shuffle(&mut rng);
                for (&d, chunk) in group.devices.iter().zip(deal(&pool, group.devices.len())) {
                    assigned[d] = chunk;
                    tags[d] = Some(group.tag.clone().unwrap_or_else(|| g.to_string()));
                }
            }
        }
        PartitionSpec::Dirichlet { concentration, tags: given } => {
            if !(*concentration > 0.0) || !concentration.is_finite() {
                return Err(Error::Invalid(format!("concentration must be positive, got {concentration}")));
            }
            if let Some(t) = given {
                if t.len() != num_devices {
                    return Err(Error::Invalid(format!("{} tags for {num_devices} devices", t.len())));
                }
                tags = t.iter().cloned().map(Some).collect();
            }
            let gamma = Gamma::new(*concentration, 1.0).map_err(|e| Error::Invalid(e.to_string()))?;
            for c in 0..data.num_classes() {
                let mut pool = by_class(c);
                pool.shuffle(&mut rng);
                let draws: Vec<f64> = (0..num_devices).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = draws.iter().sum();
                let mut cum = 0.0;
                let mut start = 0;
                for (k, d) in draws.iter().enumerate() {
                    cum += d;
                    let end = if k + 1 == num_devices {
                        pool.len()
                    } else {
                        ((cum / total) * pool.len() as f64).round() as usize
                    }
                    .clamp(start, pool.len());
                    assigned[k].extend_from_slice(&pool[start..end]);
                    start = end;
                }
            }
        }
        PartitionSpec::Iid => {
            let mut pool: Vec<usize> = (0..data.len()).collect();
            pool.shuffle(&mut rng);
            assigned = deal(&pool, num_devices);
        }
    }

    let mut out = Vec::with_capacity(num_devices);
    for (k, (mut train, tag)) in assigned.into_iter().zip(tags).enumerate() {
        if train.is_empty() {
            return Err(Error::EmptyDevice(k));
        }
        train.sort_unstable();
        out.push(DevicePartition { device_id: k, tag, train, val: Vec::new(), test: Vec::new() });
    }
    Ok(out)
}

/// Splits a device's samples into disjoint train/validation/test sets with
/// `round(n · fraction)` samples in validation and test.
pub fn split_train_val_test(
    part: &DevicePartition,
    val_fraction: f64,
    test_fraction: f64,
    seed: u64,
    require_val: bool,
) -> Result<DevicePartition> {
    if !(val_fraction >= 0.0 && test_fraction >= 0.0 && val_fraction + test_fraction < 1.0) {
        return Err(Error::Invalid(format!(
            "fractions must be non-negative with sum below 1, got val {val_fraction}, test {test_fraction}"
        )));
    }
    let mut pool = part.all_indices();
    let n = pool.len();
    pool.shuffle(&mut substream(seed, "split", &[part.device_id as u64]));
    let n_test = (n as f64 * test_fraction).round() as usize;
    let n_val = ((n as f64 * val_fraction).round() as usize).min(n - n_test);
    if require_val && n_val == 0 {
        return Err(Error::Invalid(format!("device {} has an empty validation set", part.device_id)));
    }
    let mut test = pool[..n_test].to_vec();
    let mut val = pool[n_test..n_test + n_val].to_vec();
    let mut train = pool[n_test + n_val..].to_vec();
    if train.is_empty() {
        return Err(Error::EmptyDevice(part.device_id));
    }
    test.sort_unstable();
    val.sort_unstable();
    train.sort_unstable();
    Ok(DevicePartition { device_id: part.device_id, tag: part.tag.clone(), train, val, test })
}

/// Per-device index arrays plus the partition scheme and seed that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub seed: u64,
    pub spec: PartitionSpec,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub devices: Vec<DevicePartition>,
}

impl PartitionManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
