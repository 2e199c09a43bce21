//! Layout of an output directory and helpers to read and write it.
//!
//! ```text
//! <out>/data/dataset.bin          dataset cache
//! <out>/data/partition.json       per-device index sets
//! <out>/latency/<tag>.csv         latency table per hardware profile
//! <out>/search/checkpoint.ckpt    global supernet, saved after every round
//! <out>/search/rounds.jsonl       one round report per line, timing removed
//! <out>/search/timing.jsonl       wall time per round
//! <out>/cluster/<tag>/...         the same per cluster, plus arch.json
//! <out>/arch.json                 derived architecture
//! <out>/finetune/model.ckpt       fine-tuned compact net (+ arch.json, rounds.jsonl)
//! <out>/eval/metrics.json         accuracy, size and latency metrics
//! <out>/<command>.config.json     resolved configuration of each command
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use fdnas_core::data::PartitionManifest;
use fdnas_core::{Dataset, DevicePartition, LatencyTable};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::Failure;

pub fn dataset_path(out: &Path) -> PathBuf {
    out.join("data").join("dataset.bin")
}

pub fn partition_path(out: &Path) -> PathBuf {
    out.join("data").join("partition.json")
}

pub fn table_path(out: &Path, tag: &str) -> PathBuf {
    out.join("latency").join(format!("{tag}.csv"))
}

pub fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::new("io", format!("cannot create {}: {e}", dir.display())).into())
}

/// Writes through a temporary sibling so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Echo of the resolved configuration for `command`.
pub fn write_config_echo(cfg: &ExperimentConfig, command: &str) -> anyhow::Result<()> {
    write_json(&cfg.out_dir().join(format!("{command}.config.json")), cfg)
}

/// An append-only JSON-lines file.
pub struct JsonLines {
    file: fs::File,
}

impl JsonLines {
    /// Starts the file over with `keep` as its first lines.
    pub fn create(path: &Path, keep: &[String]) -> anyhow::Result<Self> {
        if let Some(dir) = path.parent() {
            create_dir(dir)?;
        }
        let mut file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        for line in keep {
            writeln!(file, "{line}")?;
        }
        Ok(JsonLines { file })
    }

    pub fn push(&mut self, value: &impl Serialize) -> anyhow::Result<()> {
        writeln!(self.file, "{}", serde_json::to_string(value)?)?;
        self.file.flush()?;
        Ok(())
    }
}

/// Non-empty lines of a JSON-lines file; empty when the file is absent.
pub fn read_lines(path: &Path) -> anyhow::Result<Vec<String>> {
    match fs::read_to_string(path) {
        Ok(text) => Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
    }
}

/// Everything `gen` produces, loaded back.
pub struct Artifacts {
    pub data: Dataset,
    pub manifest: PartitionManifest,
    pub tables: BTreeMap<String, LatencyTable>,
}

impl Artifacts {
    pub fn load(cfg: &ExperimentConfig) -> anyhow::Result<Self> {
        let out = cfg.out_dir();
        let missing =
            |p: &Path| Failure::new("missing_artifact", format!("{} not found; run `fdnas gen` first", p.display()));
        let dp = dataset_path(out);
        if !dp.is_file() {
            return Err(missing(&dp).into());
        }
        let data = Dataset::load_cache(&dp)?;
        let pp = partition_path(out);
        if !pp.is_file() {
            return Err(missing(&pp).into());
        }
        let manifest = PartitionManifest::load(&pp)?;
        if manifest.devices.len() != cfg.partition.num_devices {
            return Err(Failure::new(
                "config",
                format!(
                    "partition has {} devices but the config asks for {}",
                    manifest.devices.len(),
                    cfg.partition.num_devices
                ),
            )
            .into());
        }
        let mut tables = BTreeMap::new();
        for tag in cfg.hardware.tags() {
            let tp = table_path(out, &tag);
            if !tp.is_file() {
                return Err(missing(&tp).into());
            }
            tables.insert(tag, LatencyTable::load(&tp, &cfg.space)?);
        }
        Ok(Artifacts { data, manifest, tables })
    }

    pub fn table(&self, tag: &str) -> anyhow::Result<&LatencyTable> {
        self.tables.get(tag).ok_or_else(|| Failure::new("config", format!("no latency table for `{tag}`")).into())
    }

    /// The listed devices in id order, or all of them.
    pub fn devices(&self, ids: Option<&[usize]>) -> anyhow::Result<Vec<DevicePartition>> {
        match ids {
            None => Ok(self.manifest.devices.clone()),
            Some(ids) => {
                let mut ids = ids.to_vec();
                ids.sort_unstable();
                ids.dedup();
                ids.iter()
                    .map(|id| {
                        self.manifest
                            .devices
                            .iter()
                            .find(|p| p.device_id == *id)
                            .cloned()
                            .ok_or_else(|| Failure::new("config", format!("unknown device {id}")).into())
                    })
                    .collect()
            }
        }
    }
}
