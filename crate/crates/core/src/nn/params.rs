use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// Optimizer / freezing group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Conv pyramid, frequency attention, temporal/spectral streams, fusion.
    FeatureExtractor,
    /// Input projection, positional mixing, transformer layers, mask embedding.
    Transformer,
    /// Supervised classification head.
    Classifier,
    /// Self-supervised prediction head.
    Projection,
    /// Quantizer input projection.
    Quantizer,
}

impl ParamGroup {
    pub fn is_encoder(self) -> bool {
        matches!(self, ParamGroup::FeatureExtractor | ParamGroup::Transformer)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::FeatureExtractor => "feature_extractor",
            ParamGroup::Transformer => "transformer",
            ParamGroup::Classifier => "classifier",
            ParamGroup::Projection => "projection",
            ParamGroup::Quantizer => "quantizer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            ParamGroup::FeatureExtractor,
            ParamGroup::Transformer,
            ParamGroup::Classifier,
            ParamGroup::Projection,
            ParamGroup::Quantizer,
        ]
        .into_iter()
        .find(|g| g.as_str() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    pub group: ParamGroup,
}

/// Named parameter and buffer storage. Ids stay valid when other entries are
/// removed.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    slots: Vec<Option<Param>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        kind: ParamKind,
        group: ParamGroup,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.slots.len());
        self.slots.push(Some(Param {
            name,
            value,
            kind,
            group,
        }));
        Ok(ParamId(self.slots.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        self.slots[id.0]
            .as_ref()
            .expect("parameter id refers to a removed entry")
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        self.slots[id.0]
            .as_mut()
            .expect("parameter id refers to a removed entry")
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.get(id).value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.slots.get(id.0).is_some_and(|s| s.is_some())
    }

    /// Remove every entry whose name starts with `prefix`; returns the number
    /// of scalar values dropped.
    pub fn remove_prefix(&mut self, prefix: &str) -> usize {
        let mut dropped = 0;
        for slot in &mut self.slots {
            if slot.as_ref().is_some_and(|p| p.name.starts_with(prefix)) {
                let p = slot.take().expect("checked");
                dropped += p.value.len();
                self.index.remove(&p.name);
            }
        }
        dropped
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|p| (ParamId(i), p)))
    }

    /// Entries in lexicographic name order.
    pub fn sorted(&self) -> Vec<(ParamId, &Param)> {
        let mut all: Vec<_> = self.iter().collect();
        all.sort_by(|a, b| a.1.name.cmp(&b.1.name));
        all
    }

    pub fn trainable_count(&self) -> usize {
        self.iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(_, p)| p.value.len())
            .sum()
    }

    pub fn count_where(&self, pred: impl Fn(&Param) -> bool) -> usize {
        self.iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable && pred(p))
            .map(|(_, p)| p.value.len())
            .sum()
    }
}
