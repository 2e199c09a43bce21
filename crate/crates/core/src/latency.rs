//! Multiply-add accounting and hardware latency lookup tables.
//!
//! Tables are stored as CSV (`layer,candidate,ms`) with a JSON sidecar
//! `<name>.meta.json` holding the hardware tag and batch size. Synthetic
//! tables come from a simple throughput model: dense and depthwise MACs are
//! charged at different rates and every operation pays a fixed overhead.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::supernet::{CandidateKind, DerivedArchitecture, LayerShape, SearchSpace};

/// Multiply-accumulate count split by kind of convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCount {
    pub dense: u64,
    pub depthwise: u64,
}

impl MacCount {
    pub fn total(&self) -> u64 {
        self.dense + self.depthwise
    }
}

impl std::ops::Add for MacCount {
    type Output = MacCount;
    fn add(self, o: MacCount) -> MacCount {
        MacCount { dense: self.dense + o.dense, depthwise: self.depthwise + o.depthwise }
    }
}

/// `k² · Cin · Cout · H · W` over the output map.
pub fn conv_macs(kernel: usize, cin: usize, cout: usize, out_h: usize, out_w: usize) -> u64 {
    (kernel * kernel * cin * cout * out_h * out_w) as u64
}

/// `k² · C · H · W` over the output map.
pub fn depthwise_macs(kernel: usize, channels: usize, out_h: usize, out_w: usize) -> u64 {
    (kernel * kernel * channels * out_h * out_w) as u64
}

/// MACs of one candidate applied to a layer with the given shape.
pub fn flops_of_candidate(kind: CandidateKind, shape: &LayerShape) -> Result<MacCount> {
    if shape.in_size == 0 || shape.in_channels == 0 || shape.out_channels == 0 {
        return Err(Error::Invalid(format!("unresolved layer shape {shape:?}")));
    }
    Ok(match kind {
        CandidateKind::Identity | CandidateKind::Zero => MacCount::default(),
        CandidateKind::Mbconv { expansion, kernel } => {
            let mid = shape.in_channels * expansion;
            let (hi, ho) = (shape.in_size, shape.out_size());
            let expand = if expansion > 1 { conv_macs(1, shape.in_channels, mid, hi, hi) } else { 0 };
            let project = conv_macs(1, mid, shape.out_channels, ho, ho);
            MacCount { dense: expand + project, depthwise: depthwise_macs(kernel, mid, ho, ho) }
        }
    })
}

fn stem_macs(input_channels: usize, stem_channels: usize, out_size: usize) -> u64 {
    conv_macs(3, input_channels, stem_channels, out_size, out_size)
}

/// Total MACs of a derived network, including stem and classifier.
pub fn derived_macs(arch: &DerivedArchitecture) -> Result<u64> {
    let mut total = stem_macs(arch.input_channels, arch.stem_channels, arch.stem_out_size());
    for l in 0..arch.layers.len() {
        total += flops_of_candidate(arch.layers[l].candidate_kind()?, &arch.layer_shape(l))?.total();
    }
    total += (arch.final_channels() * arch.num_classes) as u64;
    Ok(total)
}

/// Synthetic device model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub tag: String,
    /// Dense multiply-adds per millisecond.
    pub throughput: f64,
    /// Relative cost of a depthwise MAC versus a dense one.
    pub depthwise_factor: f64,
    /// Fixed cost of launching any operation, in milliseconds.
    pub overhead_ms: f64,
    pub batch_size: usize,
}

impl HardwareProfile {
    pub fn gpu() -> Self {
        HardwareProfile {
            tag: "gpu".into(),
            throughput: 1.0e5,
            depthwise_factor: 1.0,
            overhead_ms: 0.05,
            batch_size: 128,
        }
    }

    /// Slow depthwise convolutions make large kernels relatively expensive.
    pub fn cpu() -> Self {
        HardwareProfile {
            tag: "cpu".into(),
            throughput: 2.0e4,
            depthwise_factor: 3.0,
            overhead_ms: 0.01,
            batch_size: 128,
        }
    }

    pub fn phone() -> Self {
        HardwareProfile {
            tag: "phone".into(),
            throughput: 1.0e4,
            depthwise_factor: 2.0,
            overhead_ms: 0.02,
            batch_size: 1,
        }
    }

    pub fn by_tag(tag: &str) -> Result<Self> {
        match tag {
            "gpu" => Ok(Self::gpu()),
            "cpu" => Ok(Self::cpu()),
            "phone" => Ok(Self::phone()),
            other => Err(Error::Invalid(format!("no built-in hardware profile `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.throughput > 0.0) || self.depthwise_factor < 0.0 || self.overhead_ms < 0.0 {
            return Err(Error::Invalid(format!("invalid hardware profile {self:?}")));
        }
        Ok(())
    }

    pub fn latency_ms(&self, macs: MacCount) -> f64 {
        (macs.dense as f64 + self.depthwise_factor * macs.depthwise as f64) / self.throughput + self.overhead_ms
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TableMeta {
    hardware_tag: String,
    batch_size: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    layer: usize,
    candidate: String,
    ms: f64,
}

/// Per-(layer, candidate) latency in milliseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyTable {
    pub hardware_tag: String,
    pub batch_size: usize,
    pub entries: BTreeMap<(usize, String), f64>,
}

impl LatencyTable {
    pub fn synthesize(profile: &HardwareProfile, space: &SearchSpace) -> Result<Self> {
        profile.validate()?;
        let mut entries = BTreeMap::new();
        for l in 0..space.num_layers() {
            let shape = space.layer_shape(l);
            for kind in space.layer_candidates(l) {
                entries.insert((l, kind.id()), profile.latency_ms(flops_of_candidate(kind, &shape)?));
            }
        }
        Ok(LatencyTable { hardware_tag: profile.tag.clone(), batch_size: profile.batch_size, entries })
    }

    pub fn get(&self, layer: usize, candidate: &str) -> Result<f64> {
        self.entries
            .get(&(layer, candidate.to_string()))
            .copied()
            .ok_or_else(|| Error::MissingLatency { layer, candidate: candidate.to_string() })
    }

    pub fn layer_vector(&self, layer: usize, candidates: &[String]) -> Result<Vec<f64>> {
        candidates.iter().map(|c| self.get(layer, c)).collect()
    }

    /// Latency of a derived network: the sum of its chosen entries.
    pub fn derived_latency(&self, arch: &DerivedArchitecture) -> Result<f64> {
        arch.layers.iter().map(|l| self.get(l.layer_index, &l.candidate)).sum()
    }

    /// Every key of `space` present, every value non-negative.
    pub fn validate(&self, space: &SearchSpace) -> Result<()> {
        let missing: Vec<(usize, String)> =
            space.latency_keys().into_iter().filter(|k| !self.entries.contains_key(k)).collect();
        if !missing.is_empty() {
            return Err(Error::IncompleteTable(missing));
        }
        for ((layer, candidate), ms) in &self.entries {
            if !(*ms >= 0.0) {
                return Err(Error::NegativeLatency { layer: *layer, candidate: candidate.clone(), ms: *ms });
            }
        }
        Ok(())
    }

    pub fn meta_path(csv_path: &Path) -> PathBuf {
        let stem = csv_path.file_stem().and_then(|s| s.to_str()).unwrap_or("table");
        csv_path.with_file_name(format!("{stem}.meta.json"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for ((layer, candidate), ms) in &self.entries {
            w.serialize(Row { layer: *layer, candidate: candidate.clone(), ms: *ms })?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let meta = TableMeta { hardware_tag: self.hardware_tag.clone(), batch_size: self.batch_size };
        let meta_path = Self::meta_path(path);
        fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&meta_path, e))
    }

    /// Reads a table and checks it against `space`.
    pub fn load(path: &Path, space: &SearchSpace) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["layer", "candidate", "ms"] {
            return Err(Error::Format {
                path: path.into(),
                offset: 0,
                detail: format!(
                    "expected header `layer,candidate,ms`, got `{}`",
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            });
        }
        let mut entries = BTreeMap::new();
        for row in r.deserialize() {
            let row: Row = row?;
            entries.insert((row.layer, row.candidate), row.ms);
        }
        let meta_path = Self::meta_path(path);
        let meta: TableMeta =
            serde_json::from_str(&fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
        let table = LatencyTable { hardware_tag: meta.hardware_tag, batch_size: meta.batch_size, entries };
        table.validate(space)?;
        Ok(table)
    }
}
