use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Operation candidate kinds available to a mixed layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CandidateKind {
    /// Mobile inverted bottleneck: 1x1 expand, k x k depthwise, 1x1 project.
    Mbconv {
        expansion: usize,
        kernel: usize,
    },
    Identity,
    Zero,
}

impl CandidateKind {
    /// Stable textual id used as the latency-table key.
    pub fn id(&self) -> String {
        match self {
            CandidateKind::Mbconv { expansion, kernel } => format!("mbconv_e{expansion}_k{kernel}"),
            CandidateKind::Identity => "identity".into(),
            CandidateKind::Zero => "zero".into(),
        }
    }

    pub fn parse(id: &str) -> Result<Self> {
        match id {
            "identity" => Ok(CandidateKind::Identity),
            "zero" => Ok(CandidateKind::Zero),
            _ => {
                let bad = || Error::Invalid(format!("unknown candidate id `{id}`"));
                let rest = id.strip_prefix("mbconv_e").ok_or_else(bad)?;
                let (e, k) = rest.split_once("_k").ok_or_else(bad)?;
                let kind = CandidateKind::Mbconv {
                    expansion: e.parse().map_err(|_| bad())?,
                    kernel: k.parse().map_err(|_| bad())?,
                };
                kind.validate()?;
                Ok(kind)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if let CandidateKind::Mbconv { expansion, kernel } = self {
            if ![1, 3, 6].contains(expansion) || ![3, 5].contains(kernel) {
                return Err(Error::Invalid(format!(
                    "mbconv expansion must be 1, 3 or 6 and kernel 3 or 5, got e{expansion} k{kernel}"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for CandidateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub out_channels: usize,
    pub stride: usize,
}

/// Shape of one searchable layer once the channel plan is resolved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Spatial side length of the layer's input.
    pub in_size: usize,
}

impl LayerShape {
    pub fn out_size(&self) -> usize {
        self.in_size.div_ceil(self.stride)
    }

    pub fn preserves_shape(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }
}

/// Everything needed to build a supernet: input geometry, stem, the chain of
/// searchable layers and the candidate set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub input_channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub layers: Vec<LayerSpec>,
    pub candidates: Vec<CandidateKind>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace::toy(10)
    }
}

impl SearchSpace {
    pub fn default_candidates() -> Vec<CandidateKind> {
        vec![
            CandidateKind::Mbconv { expansion: 3, kernel: 3 },
            CandidateKind::Mbconv { expansion: 3, kernel: 5 },
            CandidateKind::Mbconv { expansion: 6, kernel: 3 },
            CandidateKind::Identity,
            CandidateKind::Zero,
        ]
    }

    /// Eight-layer desk-scale space over 8x8 single-channel images.
    pub fn toy(num_classes: usize) -> Self {
        let l = |out_channels, stride| LayerSpec { out_channels, stride };
        SearchSpace {
            input_channels: 1,
            image_size: 8,
            num_classes,
            stem_channels: 4,
            stem_stride: 2,
            layers: vec![l(8, 1), l(8, 1), l(8, 1), l(12, 2), l(12, 1), l(12, 1), l(16, 1), l(16, 1)],
            candidates: Self::default_candidates(),
        }
    }

    /// Nineteen searchable layers with six downsampling stages, widths scaled
    /// down for CPU simulation.
    pub fn mobile19(input_channels: usize, image_size: usize, num_classes: usize) -> Self {
        let plan: [(usize, usize, usize); 7] =
            [(8, 1, 1), (12, 2, 4), (16, 2, 4), (24, 2, 4), (32, 1, 4), (40, 2, 1), (48, 1, 1)];
        let mut layers = Vec::new();
        for (c, s, n) in plan {
            for i in 0..n {
                layers.push(LayerSpec { out_channels: c, stride: if i == 0 { s } else { 1 } });
            }
        }
        SearchSpace {
            input_channels,
            image_size,
            num_classes,
            stem_channels: 8,
            stem_stride: 1,
            layers,
            candidates: Self::default_candidates(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn stem_out_size(&self) -> usize {
        self.image_size.div_ceil(self.stem_stride)
    }

    pub fn layer_shape(&self, layer: usize) -> LayerShape {
        let mut ch = self.stem_channels;
        let mut size = self.stem_out_size();
        for spec in &self.layers[..layer] {
            ch = spec.out_channels;
            size = size.div_ceil(spec.stride);
        }
        let spec = self.layers[layer];
        LayerShape { in_channels: ch, out_channels: spec.out_channels, stride: spec.stride, in_size: size }
    }

    pub fn final_channels(&self) -> usize {
        self.layers.last().map_or(self.stem_channels, |l| l.out_channels)
    }

    /// Candidates legal on `layer`; identity is dropped where the layer
    /// changes shape.
    pub fn layer_candidates(&self, layer: usize) -> Vec<CandidateKind> {
        let shape = self.layer_shape(layer);
        self.candidates.iter().copied().filter(|c| *c != CandidateKind::Identity || shape.preserves_shape()).collect()
    }

    /// Every `(layer, candidate id)` key a complete latency table must hold.
    pub fn latency_keys(&self) -> Vec<(usize, String)> {
        (0..self.num_layers()).flat_map(|l| self.layer_candidates(l).into_iter().map(move |c| (l, c.id()))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.stem_channels == 0 || self.num_classes < 2 {
            return Err(Error::Invalid("channels must be positive and num_classes >= 2".into()));
        }
        if ![1, 2].contains(&self.stem_stride) || self.layers.iter().any(|l| ![1, 2].contains(&l.stride)) {
            return Err(Error::Invalid("strides must be 1 or 2".into()));
        }
        if self.layers.iter().any(|l| l.out_channels == 0) {
            return Err(Error::Invalid("layer widths must be positive".into()));
        }
        for c in &self.candidates {
            c.validate()?;
        }
        for l in 0..self.num_layers() {
            if self.layer_candidates(l).len() < 2 {
                return Err(Error::Layer { layer: l, detail: "fewer than two legal candidates".into() });
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form; checkpoints record it so they
    /// can refuse to load into a different space.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("search space serializes");
        hex::encode(Sha256::digest(&json))
    }
}
