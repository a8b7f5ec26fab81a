//! Named parameter storage shared by every model component.
//!
//! Components hold [`ParamId`] handles; values live in one [`ParamSet`] so the
//! trainer can freeze, checksum, snapshot and update them uniformly.

use sha2::{Digest, Sha256};

use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Mat,
    trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<Entry>,
}

impl ParamSet {
    pub const fn new() -> Self {
        Self { entries: Vec::new() }
    }

    /// Registers a parameter. Names are unique within a set.
    pub fn add(&mut self, name: impl Into<String>, value: Mat, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(Entry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Mat) {
        let slot = &mut self.entries[id.0].value;
        assert_eq!(slot.shape(), value.shape(), "set_value shape for {}", self.entries[id.0].name);
        *slot = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        for e in &mut self.entries {
            e.trainable = false;
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|id| self.is_trainable(*id)).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// SHA-256 over names and little-endian values of every frozen parameter.
    pub fn frozen_checksum(&self) -> String {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| !e.trainable) {
            h.update(e.name.as_bytes());
            h.update(e.value.to_le_bytes());
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
