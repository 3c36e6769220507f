use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Where a parameter came from: the pretrained model or an attached adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Base,
    Adapter,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::Base => "base",
            Origin::Adapter => "adapter",
        })
    }
}

/// Index of a parameter inside its [`ParameterRegistry`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub origin: Origin,
}

impl ParamEntry {
    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountFilter {
    All,
    Trainable,
    Frozen,
    Origin(Origin),
}

/// Ordered, uniquely named parameter store. Insertion order is the
/// iteration order and the checkpoint payload order.
#[derive(Debug, Clone, Default)]
pub struct ParameterRegistry {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParameterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        origin: Origin,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            tensor: tensor.with_grad(trainable),
            origin,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.entries[id.0].tensor.set_requires_grad(on);
    }

    /// Freeze policy: base parameters frozen, adapter parameters trainable.
    pub fn apply_freeze_policy(&mut self) {
        for e in &mut self.entries {
            e.tensor.set_requires_grad(e.origin == Origin::Adapter);
        }
    }

    pub fn set_all_trainable(&mut self, on: bool) {
        for e in &mut self.entries {
            e.tensor.set_requires_grad(on);
        }
    }

    pub fn count(&self, filter: CountFilter) -> usize {
        self.entries
            .iter()
            .filter(|e| match filter {
                CountFilter::All => true,
                CountFilter::Trainable => e.trainable(),
                CountFilter::Frozen => !e.trainable(),
                CountFilter::Origin(o) => e.origin == o,
            })
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.clear_grad();
        }
    }

    /// Adds `grads` into the matching parameter gradient buffers. Frozen
    /// parameters ignore their share.
    pub fn accumulate_grads<'g>(
        &mut self,
        grads: impl IntoIterator<Item = (ParamId, &'g [f64])>,
    ) -> Result<()> {
        for (id, g) in grads {
            self.entries[id.0].tensor.accumulate_grad(g)?;
        }
        Ok(())
    }
}
