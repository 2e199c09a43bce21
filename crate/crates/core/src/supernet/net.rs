use rand::Rng as _;

use super::blocks::{BnMode, Head, OperationCandidate, Stem};
use super::gates::{
    arch_gradient, compute_probs, gate_index, normalize_alphas, rescale_alphas, sample_active_pair, sample_gate,
    ActivePair, RescaleOutcome, RescaleRule,
};
use super::space::{CandidateKind, LayerShape, SearchSpace};
use crate::autodiff::{OptimizerState, ParamKind, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::latency::LatencyTable;
use crate::rng::{substream, Rng};

/// A searchable layer: N candidates mixed through a binary gate whose
/// distribution is the softmax of `alpha`.
#[derive(Clone, Debug)]
pub struct MixedLayer {
    pub index: usize,
    pub shape: LayerShape,
    pub candidates: Vec<OperationCandidate>,
    alpha: usize,
    arch_steps: u64,
}

impl MixedLayer {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn alpha_param(&self) -> usize {
        self.alpha
    }

    pub fn arch_steps(&self) -> u64 {
        self.arch_steps
    }

    pub fn candidate_ids(&self) -> Vec<String> {
        self.candidates.iter().map(|c| c.kind.id()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// One sampled path per layer; batch-norm running statistics update.
    WeightStep,
    /// Two sampled candidates per layer, one of them gated on.
    ArchStep,
}

/// Which candidates a layer activated in one forward pass.
#[derive(Clone, Debug)]
pub struct GateSample {
    pub layer_index: usize,
    /// Executed candidate indices (one for a weight step, two for an arch step).
    pub active: Vec<usize>,
    /// Candidates contributing to the forward pass.
    pub mask: Vec<bool>,
    pub pair: Option<ActivePair>,
    /// Gate leaves for the pair, in `(i, j)` order.
    pub gates: Vec<Var>,
    /// Layer architecture-step counter at sampling time.
    pub step: u64,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    pub samples: Vec<GateSample>,
    /// Candidate executions per layer.
    pub executions: Vec<usize>,
}

/// The over-parameterized network: stem, a chain of mixed layers, and a
/// pooled linear head. All weights, architecture parameters and batch-norm
/// statistics live in one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct SuperNet {
    pub space: SearchSpace,
    pub params: ParamSet,
    stem: Stem,
    layers: Vec<MixedLayer>,
    head: Head,
}

fn at_layer(layer: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        e @ Error::Layer { .. } => e,
        other => Error::Layer { layer, detail: other.to_string() },
    }
}

/// Path distribution for weight steps: `p` with parameter-free `zero`
/// candidates removed and the rest renormalized. A sampled `zero` would
/// disconnect the chain and leave only the classifier bias to learn.
fn weight_step_probs(p: &[f64], layer: &MixedLayer) -> Vec<f64> {
    let keep: Vec<bool> = layer.candidates.iter().map(|c| c.kind != CandidateKind::Zero).collect();
    let mass: f64 = p.iter().zip(&keep).filter(|(_, k)| **k).map(|(v, _)| v).sum();
    if mass <= 0.0 {
        return p.to_vec();
    }
    p.iter().zip(&keep).map(|(v, k)| if *k { v / mass } else { 0.0 }).collect()
}

impl SuperNet {
    /// Builds a supernet with weights drawn from `seed` and all-zero α.
    pub fn new(space: SearchSpace, seed: u64) -> Result<Self> {
        space.validate()?;
        let mut rng = substream(seed, "supernet-init", &[]);
        let mut params = ParamSet::new();
        let stem = Stem::build(space.input_channels, space.stem_channels, space.stem_stride, &mut params, &mut rng);
        let mut layers = Vec::with_capacity(space.num_layers());
        for l in 0..space.num_layers() {
            let shape = space.layer_shape(l);
            let kinds = space.layer_candidates(l);
            let candidates = kinds
                .iter()
                .enumerate()
                .map(|(n, kind)| {
                    OperationCandidate::build(
                        *kind,
                        shape.in_channels,
                        shape.out_channels,
                        shape.stride,
                        &format!("layer{l}.cand{n}"),
                        &mut params,
                        &mut rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let alpha = params.register(format!("layer{l}.alpha"), ParamKind::Arch, Tensor::zeros(&[kinds.len()]));
            layers.push(MixedLayer { index: l, shape, candidates, alpha, arch_steps: 0 });
        }
        let head = Head::build(space.final_channels(), space.num_classes, &mut params, &mut rng);
        Ok(SuperNet { space, params, stem, layers, head })
    }

    pub fn layers(&self) -> &[MixedLayer] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn alpha(&self, layer: usize) -> &[f64] {
        self.params.get(self.layers[layer].alpha).tensor.data()
    }

    pub fn set_alpha(&mut self, layer: usize, values: &[f64]) -> Result<()> {
        let idx = self.layers[layer].alpha;
        let data = self.params.get_mut(idx).tensor.data_mut();
        if data.len() != values.len() {
            return Err(Error::Layer {
                layer,
                detail: format!("expected {} α values, got {}", data.len(), values.len()),
            });
        }
        data.copy_from_slice(values);
        Ok(())
    }

    pub fn alphas(&self) -> Vec<Vec<f64>> {
        (0..self.num_layers()).map(|l| self.alpha(l).to_vec()).collect()
    }

    pub fn probs(&self, layer: usize) -> Result<Vec<f64>> {
        compute_probs(self.alpha(layer)).map_err(at_layer(layer))
    }

    /// Ids of the architecture parameters, in layer order.
    pub fn alpha_ids(&self) -> Vec<String> {
        self.layers.iter().map(|l| self.params.get(l.alpha).id.clone()).collect()
    }

    pub fn weight_sq_norm(&self) -> f64 {
        self.params.iter().filter(|p| p.kind == ParamKind::Weight).flat_map(|p| p.tensor.data()).map(|v| v * v).sum()
    }

    /// Per-layer latency vectors aligned with each layer's candidates.
    pub fn layer_latencies(&self, table: &LatencyTable) -> Result<Vec<Vec<f64>>> {
        self.layers.iter().map(|l| table.layer_vector(l.index, &l.candidate_ids())).collect()
    }

    /// `Σ_layers Σ_n p_n F_n` under the current α.
    pub fn expected_latency(&self, table: &LatencyTable) -> Result<f64> {
        let mut total = 0.0;
        for (l, f) in self.layer_latencies(table)?.iter().enumerate() {
            total += super::gates::expected_layer_latency(&self.probs(l)?, f)?;
        }
        Ok(total)
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let s = tape.value(x).shape();
        let sp = &self.space;
        if s.len() != 4 || s[0] == 0 || s[1] != sp.input_channels || s[2] != sp.image_size || s[3] != sp.image_size {
            return Err(Error::shape(
                "supernet",
                format!("expected [B>0, {}, {}, {}], got {s:?}", sp.input_channels, sp.image_size, sp.image_size),
            ));
        }
        Ok(())
    }

    /// Sampled forward pass. Only the active candidates execute.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        x: Var,
        rng: &mut Rng,
        mode: GateMode,
    ) -> Result<(Var, ForwardTrace)> {
        self.check_input(tape, x)?;
        let bn = BnMode::Train { update_stats: mode == GateMode::WeightStep };
        let mut h = self.stem.forward(tape, &mut self.params, x, bn)?;
        let mut trace = ForwardTrace::default();
        for l in 0..self.layers.len() {
            let p = self.probs(l)?;
            let layer = &self.layers[l];
            let n = layer.len();
            match mode {
                GateMode::WeightStep => {
                    let idx = gate_index(&sample_gate(&weight_step_probs(&p, layer), rng).map_err(at_layer(l))?);
                    h = layer.candidates[idx].forward(tape, &mut self.params, h, bn).map_err(at_layer(l))?;
                    let mut mask = vec![false; n];
                    mask[idx] = true;
                    trace.samples.push(GateSample {
                        layer_index: l,
                        active: vec![idx],
                        mask,
                        pair: None,
                        gates: Vec::new(),
                        step: layer.arch_steps,
                    });
                    trace.executions.push(1);
                }
                GateMode::ArchStep => {
                    let pair = sample_active_pair(&p, rng).map_err(at_layer(l))?;
                    let on_first = rng.random::<f64>() < pair.q[0];
                    let bi = tape.leaf(Tensor::scalar(if on_first { 1.0 } else { 0.0 }), true);
                    let bj = tape.leaf(Tensor::scalar(if on_first { 0.0 } else { 1.0 }), true);
                    let oi = layer.candidates[pair.i].forward(tape, &mut self.params, h, bn).map_err(at_layer(l))?;
                    let oj = layer.candidates[pair.j].forward(tape, &mut self.params, h, bn).map_err(at_layer(l))?;
                    let si = tape.scale(oi, bi)?;
                    let sj = tape.scale(oj, bj)?;
                    h = tape.add(si, sj).map_err(at_layer(l))?;
                    let mut mask = vec![false; n];
                    mask[pair.i] = true;
                    mask[pair.j] = true;
                    trace.samples.push(GateSample {
                        layer_index: l,
                        active: vec![pair.i, pair.j],
                        mask,
                        pair: Some(pair),
                        gates: vec![bi, bj],
                        step: layer.arch_steps,
                    });
                    trace.executions.push(2);
                }
            }
        }
        let logits = self.head.forward(tape, &self.params, h)?;
        Ok((logits, trace))
    }

    /// Forward pass through an explicit candidate per layer.
    pub fn forward_path(&mut self, tape: &mut Tape, x: Var, choices: &[usize], bn: BnMode) -> Result<Var> {
        self.check_input(tape, x)?;
        if choices.len() != self.layers.len() {
            return Err(Error::Invalid(format!("{} choices for {} layers", choices.len(), self.layers.len())));
        }
        let mut h = self.stem.forward(tape, &mut self.params, x, bn)?;
        for (l, &c) in choices.iter().enumerate() {
            let cand = self.layers[l]
                .candidates
                .get(c)
                .ok_or_else(|| Error::Layer { layer: l, detail: format!("no candidate {c}") })?;
            h = cand.forward(tape, &mut self.params, h, bn).map_err(at_layer(l))?;
        }
        self.head.forward(tape, &self.params, h)
    }

    /// Relaxed forward pass where each layer outputs `Σ_n p_n · o_n(x)`.
    /// Every candidate executes, so this is a test oracle for small nets.
    ///
    /// Returns the logits and per-layer gate leaves valued at `p`; their
    /// gradients fed to [`arch_gradient`] give the exact α-gradient of the
    /// relaxed loss.
    pub fn forward_mixed(&mut self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<Vec<Var>>)> {
        self.check_input(tape, x)?;
        let bn = BnMode::Train { update_stats: false };
        let mut h = self.stem.forward(tape, &mut self.params, x, bn)?;
        let mut gates = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let p = self.probs(l)?;
            let mut acc: Option<Var> = None;
            let mut layer_gates = Vec::with_capacity(p.len());
            for (n, pn) in p.iter().enumerate() {
                let b = tape.leaf(Tensor::scalar(*pn), true);
                layer_gates.push(b);
                let o = self.layers[l].candidates[n].forward(tape, &mut self.params, h, bn).map_err(at_layer(l))?;
                let s = tape.scale(o, b)?;
                acc = Some(match acc {
                    None => s,
                    Some(a) => tape.add(a, s).map_err(at_layer(l))?,
                });
            }
            h = acc.expect("at least two candidates");
            gates.push(layer_gates);
        }
        let logits = self.head.forward(tape, &self.params, h)?;
        Ok((logits, gates))
    }

    /// Two-path architecture update on one layer: the gate gradients of the
    /// sampled pair go through the architecture gradient with the
    /// pair-renormalized probabilities, Adam moves `α_i` and `α_j`, then the
    /// layer is rescaled according to `rule`.
    pub fn pair_arch_step(
        &mut self,
        sample: &GateSample,
        dl_db_pair: [f64; 2],
        adam: &mut OptimizerState,
        rule: RescaleRule,
    ) -> Result<RescaleOutcome> {
        let l = sample.layer_index;
        let layer = self.layers.get(l).ok_or_else(|| Error::Invalid(format!("no layer {l}")))?;
        if sample.step != layer.arch_steps {
            return Err(Error::StalePair { layer: l, sampled: sample.step, current: layer.arch_steps });
        }
        let pair =
            sample.pair.ok_or_else(|| Error::Layer { layer: l, detail: "gate sample has no active pair".into() })?;
        let n = layer.len();
        let alpha_idx = layer.alpha;
        let id = self.params.get(alpha_idx).id.clone();

        let p = self.probs(l)?;
        let mass = p[pair.i] + p[pair.j];
        let g2 = arch_gradient(&dl_db_pair, &pair.q).map_err(at_layer(l))?;
        let mut grad = vec![0.0; n];
        grad[pair.i] = g2[0];
        grad[pair.j] = g2[1];
        let mut mask = vec![false; n];
        mask[pair.i] = true;
        mask[pair.j] = true;
        let before = (self.alpha(l)[pair.i], self.alpha(l)[pair.j]);
        adam.step_masked(&mut self.params, &id, &grad, &mask)?;

        let alpha = self.params.get_mut(alpha_idx).tensor.data_mut();
        let outcome = if (alpha[pair.i], alpha[pair.j]) == before {
            // Nothing moved; skipping the rescale keeps α bit-identical.
            RescaleOutcome { shift: 0.0, clamped: false }
        } else {
            match rule {
                RescaleRule::PairMass => rescale_alphas(alpha, (pair.i, pair.j), mass).map_err(at_layer(l))?,
                RescaleRule::Global => RescaleOutcome { shift: normalize_alphas(alpha), clamped: false },
            }
        };
        if outcome.clamped {
            log::warn!("layer {l}: degenerate pair mass {mass} clamped during rescale");
        }
        self.layers[l].arch_steps += 1;
        Ok(outcome)
    }

    /// Candidate kind chosen by `choices` per layer.
    pub fn kinds(&self, choices: &[usize]) -> Vec<CandidateKind> {
        choices.iter().enumerate().map(|(l, &c)| self.layers[l].candidates[c].kind).collect()
    }
}
