use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::blocks::{BnMode, Head, OperationCandidate, Stem};
use super::net::SuperNet;
use super::space::{CandidateKind, LayerShape, SearchSpace};
use crate::autodiff::{ParamKind, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedLayer {
    pub layer_index: usize,
    /// Index into the supernet layer's candidate list.
    pub candidate_index: usize,
    pub candidate: String,
    pub kind: String,
    pub expansion: Option<usize>,
    pub kernel: Option<usize>,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl DerivedLayer {
    pub fn candidate_kind(&self) -> Result<CandidateKind> {
        CandidateKind::parse(&self.candidate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint_id: String,
    pub alpha_hash: String,
}

/// The compact "normal net": one chosen candidate per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedArchitecture {
    pub input_channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub layers: Vec<DerivedLayer>,
    pub provenance: Provenance,
    /// Adjustments made during derivation (e.g. a winning `zero` replaced).
    #[serde(default)]
    pub flags: Vec<String>,
}

impl DerivedArchitecture {
    pub fn choices(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.candidate_index).collect()
    }

    pub fn kinds(&self) -> Result<Vec<CandidateKind>> {
        self.layers.iter().map(|l| l.candidate_kind()).collect()
    }

    pub fn stem_out_size(&self) -> usize {
        self.image_size.div_ceil(self.stem_stride)
    }

    pub fn layer_shape(&self, layer: usize) -> LayerShape {
        let mut size = self.stem_out_size();
        for l in &self.layers[..layer] {
            size = size.div_ceil(l.stride);
        }
        let l = &self.layers[layer];
        LayerShape { in_channels: l.in_channels, out_channels: l.out_channels, stride: l.stride, in_size: size }
    }

    pub fn final_channels(&self) -> usize {
        self.layers.last().map_or(self.stem_channels, |l| l.out_channels)
    }

    /// True when every layer is an identity or a zero.
    pub fn is_degenerate(&self) -> bool {
        self.layers.iter().all(|l| l.kind == "identity") || self.layers.iter().all(|l| l.kind == "zero")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("architecture serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Rejects an architecture whose geometry or choices do not fit `space`.
    pub fn check_space(&self, space: &SearchSpace) -> Result<()> {
        let geometry = self.input_channels == space.input_channels
            && self.image_size == space.image_size
            && self.num_classes == space.num_classes
            && self.stem_channels == space.stem_channels
            && self.stem_stride == space.stem_stride
            && self.layers.len() == space.num_layers();
        let choices = geometry
            && self.layers.iter().enumerate().all(|(l, layer)| {
                let spec = space.layers[l];
                layer.out_channels == spec.out_channels
                    && layer.stride == spec.stride
                    && space.layer_candidates(l).get(layer.candidate_index).map(|c| c.id()).as_deref()
                        == Some(layer.candidate.as_str())
            });
        if !choices {
            return Err(Error::SpaceMismatch {
                checkpoint: format!("architecture {}", self.hash()),
                config: space.hash(),
            });
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let arch: DerivedArchitecture = serde_json::from_str(s)?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ch = self.stem_channels;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.layer_index != l || layer.in_channels != ch {
                return Err(Error::Layer { layer: l, detail: "layer chain does not compose".into() });
            }
            let kind = layer.candidate_kind()?;
            if kind == CandidateKind::Identity && !(layer.stride == 1 && layer.in_channels == layer.out_channels) {
                return Err(Error::Layer { layer: l, detail: "identity on a shape-changing layer".into() });
            }
            ch = layer.out_channels;
        }
        Ok(())
    }
}

fn argmax_lowest(values: &[f64], skip: Option<usize>) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if Some(i) == skip {
            continue;
        }
        if best.is_none_or(|b| *v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Hex SHA-256 over every layer's α (little-endian f64 bytes).
pub fn alpha_hash(alphas: &[Vec<f64>]) -> String {
    let mut h = Sha256::new();
    for a in alphas {
        h.update((a.len() as u64).to_le_bytes());
        for v in a {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Keeps the highest-probability candidate of every layer (lowest index on
/// ties) and prunes the rest.
///
/// Layers form a single chain, so a winning `zero` would disconnect the
/// network; it is replaced by the runner-up and recorded in `flags`.
pub fn derive_normal_net(net: &SuperNet, checkpoint_id: &str) -> Result<DerivedArchitecture> {
    let space = &net.space;
    let mut layers = Vec::with_capacity(net.num_layers());
    let mut flags = Vec::new();
    for (l, layer) in net.layers().iter().enumerate() {
        let alpha = net.alpha(l);
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::Layer { layer: l, detail: "non-finite architecture parameters".into() });
        }
        let mut chosen = argmax_lowest(alpha, None).expect("non-empty layer");
        if layer.candidates[chosen].kind == CandidateKind::Zero {
            let runner_up = argmax_lowest(alpha, Some(chosen)).expect("at least two candidates");
            flags.push(format!(
                "layer {l}: zero won but would disconnect the network; using {}",
                layer.candidates[runner_up].kind
            ));
            chosen = runner_up;
        }
        let cand = &layer.candidates[chosen];
        if cand.kind == CandidateKind::Identity && !layer.shape.preserves_shape() {
            return Err(Error::Layer { layer: l, detail: "identity chosen on a shape-changing layer".into() });
        }
        let (kind, expansion, kernel) = match cand.kind {
            CandidateKind::Mbconv { expansion, kernel } => ("mbconv", Some(expansion), Some(kernel)),
            CandidateKind::Identity => ("identity", None, None),
            CandidateKind::Zero => ("zero", None, None),
        };
        layers.push(DerivedLayer {
            layer_index: l,
            candidate_index: chosen,
            candidate: cand.kind.id(),
            kind: kind.into(),
            expansion,
            kernel,
            stride: cand.stride,
            in_channels: cand.in_channels,
            out_channels: cand.out_channels,
        });
    }
    Ok(DerivedArchitecture {
        input_channels: space.input_channels,
        image_size: space.image_size,
        num_classes: space.num_classes,
        stem_channels: space.stem_channels,
        stem_stride: space.stem_stride,
        layers,
        provenance: Provenance { checkpoint_id: checkpoint_id.to_string(), alpha_hash: alpha_hash(&net.alphas()) },
        flags,
    })
}

/// Standalone network built from a [`DerivedArchitecture`].
#[derive(Clone, Debug)]
pub struct NormalNet {
    pub arch: DerivedArchitecture,
    pub params: ParamSet,
    stem: Stem,
    blocks: Vec<OperationCandidate>,
    head: Head,
}

impl NormalNet {
    /// Fresh weights drawn from `seed`.
    pub fn new(arch: &DerivedArchitecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = substream(seed, "normal-init", &[]);
        let mut params = ParamSet::new();
        let stem = Stem::build(arch.input_channels, arch.stem_channels, arch.stem_stride, &mut params, &mut rng);
        let blocks = arch
            .layers
            .iter()
            .map(|l| {
                OperationCandidate::build(
                    l.candidate_kind()?,
                    l.in_channels,
                    l.out_channels,
                    l.stride,
                    &format!("block{}", l.layer_index),
                    &mut params,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Head::build(arch.final_channels(), arch.num_classes, &mut params, &mut rng);
        Ok(NormalNet { arch: arch.clone(), params, stem, blocks, head })
    }

    /// Copies the stem, head and chosen candidates' weights out of `net`.
    pub fn from_supernet(net: &SuperNet, arch: &DerivedArchitecture) -> Result<Self> {
        let mut out = Self::new(arch, 0)?;
        if arch.layers.len() != net.num_layers() {
            return Err(Error::Invalid("architecture does not match supernet depth".into()));
        }
        for p in out.params.iter_mut() {
            if p.id.starts_with("stem.") || p.id.starts_with("head.") {
                let src = net.params.by_id(&p.id).expect("shared stem/head ids");
                p.tensor.data_mut().copy_from_slice(src.tensor.data());
            }
        }
        for (l, layer) in arch.layers.iter().enumerate() {
            let src = net.layers()[l]
                .candidates
                .get(layer.candidate_index)
                .ok_or_else(|| Error::Layer { layer: l, detail: "candidate index out of range".into() })?;
            if src.kind.id() != layer.candidate {
                return Err(Error::Layer {
                    layer: l,
                    detail: format!("supernet has {} where {} was derived", src.kind, layer.candidate),
                });
            }
            for (dst, s) in out.blocks[l].param_indices().into_iter().zip(src.param_indices()) {
                let data = net.params.get(s).tensor.data().to_vec();
                out.params.get_mut(dst).tensor.data_mut().copy_from_slice(&data);
            }
        }
        Ok(out)
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, bn: BnMode) -> Result<Var> {
        let mut h = self.stem.forward(tape, &mut self.params, x, bn)?;
        for (l, block) in self.blocks.iter().enumerate() {
            h = block
                .forward(tape, &mut self.params, h, bn)
                .map_err(|e| Error::Layer { layer: l, detail: e.to_string() })?;
        }
        self.head.forward(tape, &self.params, h)
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.params.count(ParamKind::Weight)
    }
}
