//! The experiment configuration file and its resolution.
//!
//! A config is a TOML document whose tables mirror [`ExperimentConfig`].
//! Every field is optional; [`ExperimentConfig::resolve`] applies command
//! line overrides, fills in values that depend on other fields and checks
//! the whole tree for consistency.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use fdnas_core::federation::{ClusterKey, FinetuneConfig, LocalTuning, SearchConfig};
use fdnas_core::{HardwareProfile, PartitionSpec, SearchSpace};
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of every random stream in the experiment.
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub space: SearchSpace,
    pub hardware: HardwareConfig,
    pub search: SearchConfig,
    pub cluster: ClusterConfig,
    pub finetune: FinetuneConfig,
    /// Local adaptation before mean-local evaluation.
    pub eval: LocalTuning,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: None,
            dataset: DatasetConfig::default(),
            partition: PartitionConfig::default(),
            space: SearchSpace::toy(10),
            hardware: HardwareConfig::default(),
            search: SearchConfig::default(),
            cluster: ClusterConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: LocalTuning::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    #[default]
    Synthetic,
    /// Little-endian image and label files (see `fdnas_core::data::load_raw_images`).
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    pub num_classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub size: usize,
    pub difficulty: f64,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: DatasetSource::Synthetic,
            num_classes: 10,
            per_class: 60,
            channels: 1,
            size: 8,
            difficulty: 0.5,
            images: None,
            labels: None,
        }
    }
}

impl DatasetConfig {
    pub fn synthetic_spec(&self) -> fdnas_core::data::SyntheticSpec {
        fdnas_core::data::SyntheticSpec {
            num_classes: self.num_classes,
            per_class: self.per_class,
            channels: self.channels,
            size: self.size,
            difficulty: self.difficulty,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub num_devices: usize,
    pub scheme: PartitionSpec,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// One hardware tag per device. When absent, the first 30% of devices
    /// are `gpu`, the next 30% `cpu` and the rest `phone`.
    pub hardware_tags: Option<Vec<String>>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            num_devices: 10,
            scheme: PartitionSpec::three_groups(),
            val_fraction: 0.15,
            test_fraction: 0.15,
            hardware_tags: None,
        }
    }
}

pub fn default_hardware_tags(num_devices: usize) -> Vec<String> {
    (0..num_devices)
        .map(|d| {
            if d * 10 < num_devices * 3 {
                "gpu"
            } else if d * 10 < num_devices * 6 {
                "cpu"
            } else {
                "phone"
            }
            .to_string()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardwareConfig {
    pub profiles: Vec<HardwareProfile>,
    /// Latency tables to use instead of synthesizing one from the profile
    /// with the same tag.
    pub tables: BTreeMap<String, PathBuf>,
    /// Profile whose table drives the latency term of the global search.
    pub search_table: String,
}

impl Default for HardwareConfig {
    fn default() -> Self {
        HardwareConfig {
            profiles: vec![HardwareProfile::gpu(), HardwareProfile::cpu(), HardwareProfile::phone()],
            tables: BTreeMap::new(),
            search_table: "cpu".into(),
        }
    }
}

impl HardwareConfig {
    pub fn tags(&self) -> Vec<String> {
        self.profiles.iter().map(|p| p.tag.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub key: ClusterKey,
    pub rounds: usize,
    /// Start every cluster with fresh optimizer buffers.
    pub reset_optimizers: bool,
    /// `λ2` for clusters not listed in `lambda2`.
    pub default_lambda2: f64,
    pub lambda2: BTreeMap<String, f64>,
    /// Profile tag whose table a cluster uses. Defaults to the cluster's own
    /// tag when a profile has it, else to `hardware.search_table`.
    pub table: BTreeMap<String, String>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            key: ClusterKey::Hardware,
            rounds: 6,
            reset_optimizers: true,
            default_lambda2: 0.02,
            lambda2: BTreeMap::new(),
            table: BTreeMap::new(),
        }
    }
}

/// Values given on the command line; they win over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| Failure::new("config", format!("{}: {e}", path.display())).into())
    }

    /// The file at `path`, or the defaults when no file is given.
    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Applies overrides, materializes derived defaults and validates.
    pub fn resolve(mut self, o: &Overrides) -> anyhow::Result<Self> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out_dir = Some(out.clone());
        }
        if self.out_dir.is_none() {
            self.out_dir = Some(PathBuf::from("out"));
        }
        if let Some(w) = o.workers {
            self.search.workers = w;
            self.finetune.workers = w;
        }
        // Sub-seeds follow the root; components derive named streams from it.
        self.search.seed = self.seed;
        self.finetune.seed = self.seed;
        self.eval.seed = self.seed;
        if self.partition.hardware_tags.is_none() {
            self.partition.hardware_tags = Some(default_hardware_tags(self.partition.num_devices));
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> anyhow::Result<()> {
        let invalid = |msg: String| -> anyhow::Result<()> { Err(Failure::new("config", msg).into()) };
        self.space.validate()?;
        let d = &self.dataset;
        match d.source {
            DatasetSource::Synthetic => {
                if d.num_classes != self.space.num_classes
                    || d.channels != self.space.input_channels
                    || d.size != self.space.image_size
                {
                    return invalid(format!(
                        "dataset ({} classes, {} channels, {}px) does not fit the search space ({} classes, {} channels, {}px)",
                        d.num_classes,
                        d.channels,
                        d.size,
                        self.space.num_classes,
                        self.space.input_channels,
                        self.space.image_size
                    ));
                }
            }
            DatasetSource::Raw => {
                for (name, p) in [("images", &d.images), ("labels", &d.labels)] {
                    match p {
                        None => return invalid(format!("raw dataset needs `dataset.{name}`")),
                        Some(p) if !p.is_file() => {
                            return invalid(format!("dataset.{name}: {} does not exist", p.display()))
                        }
                        _ => {}
                    }
                }
            }
        }
        if self.partition.num_devices == 0 {
            return invalid("partition.num_devices must be positive".into());
        }
        let tags = self.partition.hardware_tags.as_ref().expect("materialized by resolve");
        if tags.len() != self.partition.num_devices {
            return invalid(format!("{} hardware tags for {} devices", tags.len(), self.partition.num_devices));
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.hardware.profiles {
            p.validate()?;
            if !seen.insert(p.tag.as_str()) {
                return invalid(format!("hardware profile `{}` defined twice", p.tag));
            }
        }
        if !seen.contains(self.hardware.search_table.as_str()) {
            return invalid(format!("hardware.search_table `{}` names no profile", self.hardware.search_table));
        }
        for (tag, path) in &self.hardware.tables {
            if !seen.contains(tag.as_str()) {
                return invalid(format!("hardware.tables has `{tag}` but no profile with that tag"));
            }
            if !path.is_file() {
                return invalid(format!("hardware.tables.{tag}: {} does not exist", path.display()));
            }
        }
        for (cluster, table) in &self.cluster.table {
            if !seen.contains(table.as_str()) {
                return invalid(format!("cluster.table.{cluster} = `{table}` names no profile"));
            }
        }
        if self.search.workers == 0 || self.finetune.workers == 0 {
            return invalid("workers must be positive".into());
        }
        Ok(())
    }

    pub fn out_dir(&self) -> &Path {
        self.out_dir.as_deref().expect("materialized by resolve")
    }

    pub fn hardware_tags(&self) -> &[String] {
        self.partition.hardware_tags.as_deref().expect("materialized by resolve")
    }

    /// Profile tag whose table the cluster `tag` uses.
    pub fn cluster_table(&self, tag: &str) -> String {
        self.cluster.table.get(tag).cloned().unwrap_or_else(|| {
            if self.hardware.profiles.iter().any(|p| p.tag == tag) {
                tag.to_string()
            } else {
                self.hardware.search_table.clone()
            }
        })
    }

    pub fn cluster_lambda2(&self, tag: &str) -> f64 {
        self.cluster.lambda2.get(tag).copied().unwrap_or(self.cluster.default_lambda2)
    }

    /// Makes the per-cluster settings of `tags` explicit.
    pub fn materialize_clusters<'a>(&mut self, tags: impl IntoIterator<Item = &'a String>) {
        for tag in tags {
            let table = self.cluster_table(tag);
            let lambda2 = self.cluster_lambda2(tag);
            self.cluster.table.insert(tag.clone(), table);
            self.cluster.lambda2.insert(tag.clone(), lambda2);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_tags_follow_the_three_way_layout() {
        let t = default_hardware_tags(10);
        assert_eq!(&t[..3], ["gpu", "gpu", "gpu"]);
        assert_eq!(&t[3..6], ["cpu", "cpu", "cpu"]);
        assert!(t[6..].iter().all(|s| s == "phone"));
    }

    #[test]
    fn partial_files_keep_other_defaults() {
        let cfg: ExperimentConfig = toml::from_str(
            r#"
            seed = 7
            [search]
            rounds = 3
            [partition.scheme]
            kind = "iid"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.search.rounds, 3);
        assert_eq!(cfg.search.local_epochs, SearchConfig::default().local_epochs);
        assert_eq!(cfg.partition.scheme, PartitionSpec::Iid);
        let r = cfg.resolve(&Overrides { workers: Some(2), ..Default::default() }).unwrap();
        assert_eq!((r.search.seed, r.finetune.seed, r.eval.seed), (7, 7, 7));
        assert_eq!(r.search.workers, 2);
        assert_eq!(r.hardware_tags().len(), 10);
    }

    #[test]
    fn unknown_keys_and_bad_references_are_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("sede = 1").is_err());
        assert!(toml::from_str::<ExperimentConfig>("[cluster]\nkey = \"colour\"").is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.hardware.search_table = "tpu".into();
        assert!(cfg.resolve(&Overrides::default()).is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.num_classes = 3;
        assert!(cfg.resolve(&Overrides::default()).is_err());
    }

    #[test]
    fn cluster_settings_fall_back_sensibly() {
        let mut cfg = ExperimentConfig::default().resolve(&Overrides::default()).unwrap();
        cfg.cluster.lambda2.insert("cpu".into(), 0.5);
        assert_eq!(cfg.cluster_table("gpu"), "gpu");
        assert_eq!(cfg.cluster_table("2"), "cpu");
        assert_eq!(cfg.cluster_lambda2("cpu"), 0.5);
        assert_eq!(cfg.cluster_lambda2("gpu"), cfg.cluster.default_lambda2);
    }
}
