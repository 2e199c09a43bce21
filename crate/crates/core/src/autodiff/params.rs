use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// What role a parameter plays during training and aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    /// Trainable network weight, optimized with momentum SGD.
    Weight,
    /// Architecture parameter, optimized with Adam and never weight-decayed.
    Arch,
    /// Non-trainable state (batch-norm running statistics). Averaged like weights.
    Buffer,
}

impl ParamKind {
    pub fn code(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Arch => 1,
            ParamKind::Buffer => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ParamKind::Weight),
            1 => Some(ParamKind::Arch),
            2 => Some(ParamKind::Buffer),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub id: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

/// Ordered collection of parameters addressed by index or by stable string id.
///
/// Ids are unique within a set and identical across every replica of the same
/// network, which is what federated aggregation keys on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, id: impl Into<String>, kind: ParamKind, tensor: Tensor) -> usize {
        let id = id.into();
        assert!(!self.index.contains_key(&id), "duplicate parameter id `{id}`");
        let idx = self.params.len();
        self.index.insert(id.clone(), idx);
        self.params.push(Parameter { id, kind, tensor });
        idx
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Parameter {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter {
        &mut self.params[idx]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn by_id(&self, id: &str) -> Option<&Parameter> {
        self.position(id).map(|i| &self.params[i])
    }

    pub fn by_id_mut(&mut self, id: &str) -> Option<&mut Parameter> {
        self.position(id).map(move |i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.params.iter().map(|p| p.id.as_str()).collect()
    }

    /// Ids present in exactly one of the two sets, sorted.
    pub fn symmetric_difference(&self, other: &ParamSet) -> Vec<String> {
        let a = self.ids();
        let b = other.ids();
        a.symmetric_difference(&b).map(|s| s.to_string()).collect()
    }

    /// Total number of scalar values across parameters of the given kind.
    pub fn count(&self, kind: ParamKind) -> usize {
        self.params.iter().filter(|p| p.kind == kind).map(|p| p.tensor.numel()).sum()
    }

    /// Overwrite values of every parameter in `self` from `src`, matched by id.
    pub fn copy_from(&mut self, src: &ParamSet) -> Result<()> {
        let diff = self.symmetric_difference(src);
        if !diff.is_empty() {
            return Err(Error::ParamMismatch(diff));
        }
        for p in self.params.iter_mut() {
            let s = src.by_id(&p.id).expect("checked above");
            if s.tensor.shape() != p.tensor.shape() {
                return Err(Error::shape(
                    "copy_from",
                    format!("`{}`: {:?} vs {:?}", p.id, p.tensor.shape(), s.tensor.shape()),
                ));
            }
            p.tensor.data_mut().copy_from_slice(s.tensor.data());
        }
        Ok(())
    }
}
