//! Named parameter store.
//!
//! Layers register their tensors here and keep `ParamId` handles. Trainable
//! entries (`requires_grad = true`) receive gradients from the tape; buffer
//! entries (slow traces, running statistics) never do.

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

pub struct Entry {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

#[derive(Default)]
pub struct Params {
    entries: Vec<Entry>,
}

impl Params {
    pub fn new() -> Self {
        Params { entries: Vec::new() }
    }

    /// Register a trainable parameter.
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, t: Tensor) -> ParamId {
        self.add_entry(name, group, t.with_grad())
    }

    /// Register a non-trainable buffer (never bound with gradient).
    pub fn add_buffer(&mut self, name: impl Into<String>, group: ParamGroup, mut t: Tensor) -> ParamId {
        t.requires_grad = false;
        self.add_entry(name, group, t)
    }

    fn add_entry(&mut self, name: impl Into<String>, group: ParamGroup, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.entries.push(Entry { name, group, tensor: t });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &Entry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Ids of all trainable entries, in registration order.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.tensor.requires_grad)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Bind a parameter onto a tape (memoized per tape).
    pub fn node(&self, tape: &mut Tape, id: ParamId) -> crate::tape::NodeId {
        tape.bind(id.0, &self.entries[id.0].tensor)
    }

    /// Copy gradients from a walked tape into `grad` of every bound
    /// trainable parameter; parameters the graph never touched get zeros
    /// only if they were bound.
    pub fn write_grads(&mut self, tape: &Tape) {
        for (slot, node) in tape.bound_params() {
            let entry = &mut self.entries[slot];
            if entry.tensor.requires_grad {
                entry.tensor.grad = Some(Box::new(tape.grad_tensor(node)));
            }
        }
    }

    /// Clear all gradients.
    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.grad = None;
        }
    }

    /// Total trainable element count.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.tensor.requires_grad)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for e in &self.entries {
            e.tensor
                .check_finite(&e.name)
                .map_err(|_| Error::contract(format!("non-finite parameter {}", e.name)))?;
        }
        Ok(())
    }
}
