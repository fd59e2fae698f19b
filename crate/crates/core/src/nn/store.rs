use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    /// Buffers (e.g. batch-norm running statistics) are stored but never
    /// optimized.
    pub trainable: bool,
}

/// Ordered map of fully qualified parameter name to tensor.
///
/// Insertion order is the iteration order, which makes serialization and
/// optimizer state layout deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, ParamEntry { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    /// Replace the value of an existing entry; the shape must not change.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::shape("ParamStore::set", entry.tensor.shape(), tensor.shape()));
        }
        entry.tensor = tensor;
        Ok(())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter().filter(|(_, e)| e.trainable).map(|(k, e)| (k, &e.tensor))
    }

    pub fn trainable_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries
            .iter_mut()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.as_str(), &mut e.tensor))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    /// Record every trainable entry on `tape`. Frozen bindings produce
    /// constants, so no gradient can reach them.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Binding {
        let vars = self
            .trainable()
            .map(|(name, t)| (name.to_string(), tape.leaf(t.clone(), requires_grad)))
            .collect();
        Binding { vars }
    }

    /// Same names, same shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|((na, ea), (nb, eb))| {
                na == nb && ea.trainable == eb.trainable && ea.tensor.shape() == eb.tensor.shape()
            })
    }
}

/// Tape variables for the trainable entries of one [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Binding {
    vars: IndexMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradient per bound parameter; exact zeros for unreachable ones.
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> IndexMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(name, &v)| (name.clone(), grads.wrt(tape, v)))
            .collect()
    }
}
