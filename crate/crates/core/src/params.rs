//! Named parameter tensors, grouped for freezing, bound onto a tape per step.

use std::collections::BTreeSet;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{Gradients, Tape, Tensor, Var};

/// Coarse parameter groups; the unit of freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    EncoderStage1,
    EncoderStage2,
    EncoderStage3,
    EncoderStage4,
    Projection,
    Embedding,
    Fusion,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::EncoderStage1,
        ParamGroup::EncoderStage2,
        ParamGroup::EncoderStage3,
        ParamGroup::EncoderStage4,
        ParamGroup::Projection,
        ParamGroup::Embedding,
        ParamGroup::Fusion,
    ];

    pub fn encoder_stage(stage: usize) -> ParamGroup {
        match stage {
            1 => ParamGroup::EncoderStage1,
            2 => ParamGroup::EncoderStage2,
            3 => ParamGroup::EncoderStage3,
            4 => ParamGroup::EncoderStage4,
            _ => panic!("encoder has stages 1..=4, got {stage}"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::EncoderStage1 => "encoder_stage1",
            ParamGroup::EncoderStage2 => "encoder_stage2",
            ParamGroup::EncoderStage3 => "encoder_stage3",
            ParamGroup::EncoderStage4 => "encoder_stage4",
            ParamGroup::Projection => "projection",
            ParamGroup::Embedding => "embedding",
            ParamGroup::Fusion => "fusion",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub group: ParamGroup,
}

/// Insertion-ordered collection of every trainable tensor in the system.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) {
        self.params.insert(name.into(), Param { value, group });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn group_of(&self, name: &str) -> Option<ParamGroup> {
        self.params.get(name).map(|p| p.group)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn groups(&self) -> BTreeSet<ParamGroup> {
        self.params.values().map(|p| p.group).collect()
    }

    /// Registers every parameter as a leaf; those whose group is in
    /// `trainable` are tracked.
    pub fn bind(&self, tape: &mut Tape, trainable: &BTreeSet<ParamGroup>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| {
                let var = tape.leaf(p.value.clone(), trainable.contains(&p.group));
                (name.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// SHA-256 over the little-endian `f32` image of one group, the same
    /// bytes a checkpoint stores.
    pub fn group_checksum(&self, group: ParamGroup) -> String {
        let mut hasher = Sha256::new();
        for (name, p) in &self.params {
            if p.group != group {
                continue;
            }
            hasher.update(name.as_bytes());
            for v in p.value.data() {
                hasher.update((*v as f32).to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Rounds every value to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for p in self.params.values_mut() {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Tape handles for a bound [`ParamStore`].
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Collects per-parameter gradients for tracked leaves.
    pub fn gradients(&self, grads: &mut Gradients) -> IndexMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_tracks_only_trainable_groups() {
        let mut store = ParamStore::new();
        store.insert("a", ParamGroup::Projection, Tensor::scalar(2.0));
        store.insert("b", ParamGroup::Fusion, Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let trainable = BTreeSet::from([ParamGroup::Fusion]);
        let bound = store.bind(&mut tape, &trainable);
        let p = tape.mul(bound.var("a"), bound.var("b"));
        let mut g = tape.backward(p).unwrap();
        let grads = bound.gradients(&mut g);
        assert_eq!(grads.len(), 1);
        assert_eq!(grads["b"].item(), 2.0);
    }

    #[test]
    fn checksum_changes_with_values() {
        let mut store = ParamStore::new();
        store.insert("a", ParamGroup::Projection, Tensor::scalar(2.0));
        let before = store.group_checksum(ParamGroup::Projection);
        assert_eq!(before, store.group_checksum(ParamGroup::Projection));
        store.get_mut("a").unwrap().data_mut()[0] = 2.5;
        assert_ne!(before, store.group_checksum(ParamGroup::Projection));
    }
}
