//! Named parameter registry. Model components register their weights here
//! and keep stable [`ParamId`] handles; the tape stages values per forward
//! pass and flushes gradients back after `backward`.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::tensor::Array;

pub type ParamId = usize;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Array,
    /// Trainable entries own a gradient accumulator of matching shape;
    /// frozen entries never receive gradients at all.
    pub trainable: bool,
    /// Exempt from weight decay (norm affines, positional embeddings).
    pub decay_exempt: bool,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: &str,
        value: Array,
        trainable: bool,
        decay_exempt: bool,
    ) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let grad = if trainable { vec![0.0; value.numel()] } else { Vec::new() };
        let id = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
            decay_exempt,
            grad,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id]
    }

    pub fn by_name(&self, name: &str) -> Result<&ParamEntry> {
        Ok(self.get(self.id(name)?))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in registration order (the deterministic iteration order).
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Flip trainability for every entry whose name starts with `prefix`,
    /// allocating or dropping gradient buffers to keep the invariant
    /// "grad allocated iff trainable".
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
                e.grad = if trainable { vec![0.0; e.value.numel()] } else { Vec::new() };
            }
        }
    }

    /// Total count of trainable scalars, optionally restricted to a prefix.
    pub fn trainable_scalars(&self, prefix: Option<&str>) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && prefix.map_or(true, |p| e.name.starts_with(p)))
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Order-sensitive hash over all frozen entries (names, shapes, bits).
    /// Used to assert that training never touches frozen weights.
    pub fn frozen_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for e in &self.entries {
            if !e.trainable {
                e.name.hash(&mut h);
                e.value.shape.hash(&mut h);
                for v in &e.value.data {
                    v.to_bits().hash(&mut h);
                }
            }
        }
        h.finish()
    }

    /// Sum of |grad| over every trainable entry matching the prefix filter.
    pub fn grad_abs_sum(&self, prefix: Option<&str>) -> f64 {
        self.entries
            .iter()
            .filter(|e| prefix.map_or(true, |p| e.name.starts_with(p)))
            .flat_map(|e| e.grad.iter())
            .map(|g| g.abs())
            .sum()
    }

    /// Snapshot of trainable values, for best-checkpoint tracking.
    pub fn snapshot_trainable(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.iter()
            .filter(|(_, e)| e.trainable)
            .map(|(id, e)| (id, e.value.data.clone()))
            .collect()
    }

    pub fn restore_trainable(&mut self, snapshot: &[(ParamId, Vec<f64>)]) {
        for (id, data) in snapshot {
            self.entries[*id].value.data.copy_from_slice(data);
        }
    }
}
