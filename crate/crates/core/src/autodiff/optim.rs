use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamKind, ParamSet};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    SgdMomentum(SgdConfig),
    Adam(AdamConfig),
}

impl OptimizerKind {
    fn name(&self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum(_) => "sgd_momentum",
            OptimizerKind::Adam(_) => "adam",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Buffers {
    Momentum(Vec<f64>),
    // Step counts are kept per element so that partially-masked updates
    // (two-path architecture steps) get the right bias correction.
    Adam { m: Vec<f64>, v: Vec<f64>, t: Vec<u64> },
}

/// Hyperparameters plus per-parameter buffers, created lazily on first step.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    buffers: BTreeMap<String, Buffers>,
}

impl OptimizerState {
    pub fn sgd(cfg: SgdConfig) -> Self {
        OptimizerState { kind: OptimizerKind::SgdMomentum(cfg), buffers: BTreeMap::new() }
    }

    pub fn adam(cfg: AdamConfig) -> Self {
        OptimizerState { kind: OptimizerKind::Adam(cfg), buffers: BTreeMap::new() }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match &mut self.kind {
            OptimizerKind::SgdMomentum(c) => c.lr = lr,
            OptimizerKind::Adam(c) => c.lr = lr,
        }
    }

    pub fn lr(&self) -> f64 {
        match &self.kind {
            OptimizerKind::SgdMomentum(c) => c.lr,
            OptimizerKind::Adam(c) => c.lr,
        }
    }

    pub fn reset(&mut self) {
        self.buffers.clear();
    }

    /// Flattened buffers as `(name, values)` pairs for persistence.
    pub fn export(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (id, buf) in &self.buffers {
            match buf {
                Buffers::Momentum(v) => out.push((format!("{id}/momentum"), v.clone())),
                Buffers::Adam { m, v, t } => {
                    out.push((format!("{id}/m"), m.clone()));
                    out.push((format!("{id}/v"), v.clone()));
                    out.push((format!("{id}/t"), t.iter().map(|&s| s as f64).collect()));
                }
            }
        }
        out
    }

    pub fn import(&mut self, entries: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        self.buffers.clear();
        for (name, data) in entries {
            let (id, field) =
                name.rsplit_once('/').ok_or_else(|| Error::Invalid(format!("bad optimizer buffer name `{name}`")))?;
            match (&self.kind, field) {
                (OptimizerKind::SgdMomentum(_), "momentum") => {
                    self.buffers.insert(id.to_string(), Buffers::Momentum(data.clone()));
                }
                (OptimizerKind::Adam(_), "m" | "v" | "t") => {
                    let n = data.len();
                    let entry = self.buffers.entry(id.to_string()).or_insert_with(|| Buffers::Adam {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                        t: vec![0; n],
                    });
                    if let Buffers::Adam { m, v, t } = entry {
                        match field {
                            "m" => *m = data.clone(),
                            "v" => *v = data.clone(),
                            _ => *t = data.iter().map(|&s| s as u64).collect(),
                        }
                    }
                }
                _ => return Err(Error::Invalid(format!("buffer `{name}` does not fit {}", self.kind.name()))),
            }
        }
        Ok(())
    }

    /// Updates every parameter in `ids` from `grads`.
    pub fn step(&mut self, params: &mut ParamSet, ids: &[String], grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        for id in ids {
            let g = grads.get(id).ok_or_else(|| Error::MissingGrad(id.clone()))?;
            self.step_one(params, id, g, None)?;
        }
        Ok(())
    }

    /// Adam update restricted to the entries where `mask` is true; the other
    /// entries keep their values and moment buffers.
    pub fn step_masked(&mut self, params: &mut ParamSet, id: &str, grad: &[f64], mask: &[bool]) -> Result<()> {
        if !matches!(self.kind, OptimizerKind::Adam(_)) {
            return Err(Error::OptimizerKind { expected: "adam", found: self.kind.name() });
        }
        self.step_one(params, id, grad, Some(mask))
    }

    fn step_one(&mut self, params: &mut ParamSet, id: &str, g: &[f64], mask: Option<&[bool]>) -> Result<()> {
        let p = params.by_id_mut(id).ok_or_else(|| Error::Invalid(format!("unknown parameter `{id}`")))?;
        let n = p.tensor.numel();
        if g.len() != n || mask.is_some_and(|m| m.len() != n) {
            return Err(Error::shape("optimizer", format!("`{id}` has {n} values, gradient has {}", g.len())));
        }
        let is_arch = p.kind == ParamKind::Arch;
        let w = p.tensor.data_mut();
        match self.kind {
            OptimizerKind::SgdMomentum(c) => {
                let buf = self.buffers.entry(id.to_string()).or_insert_with(|| Buffers::Momentum(vec![0.0; n]));
                let Buffers::Momentum(v) = buf else { unreachable!() };
                let wd = if is_arch { 0.0 } else { c.weight_decay };
                for i in 0..n {
                    v[i] = c.momentum * v[i] + g[i] + wd * w[i];
                    w[i] -= c.lr * v[i];
                }
            }
            OptimizerKind::Adam(c) => {
                let buf = self.buffers.entry(id.to_string()).or_insert_with(|| Buffers::Adam {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    t: vec![0; n],
                });
                let Buffers::Adam { m, v, t } = buf else { unreachable!() };
                let wd = if is_arch { 0.0 } else { c.weight_decay };
                for i in 0..n {
                    if mask.is_some_and(|mk| !mk[i]) {
                        continue;
                    }
                    let gi = g[i] + wd * w[i];
                    t[i] += 1;
                    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                    let mhat = m[i] / (1.0 - c.beta1.powi(t[i] as i32));
                    let vhat = v[i] / (1.0 - c.beta2.powi(t[i] as i32));
                    w[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
                }
            }
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate: `lr0 · ½ · (1 + cos(π · round / total))`.
pub fn cosine_lr(round: usize, total_rounds: usize, lr0: f64) -> Result<f64> {
    if total_rounds == 0 {
        return Err(Error::Invalid("total_rounds must be at least 1".into()));
    }
    if round > total_rounds {
        return Err(Error::Invalid(format!("round {round} beyond schedule of {total_rounds}")));
    }
    let frac = round as f64 / total_rounds as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}
