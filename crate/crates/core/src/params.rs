//! Named parameter store.
//!
//! Parameters live outside the tape; a forward pass binds every entry as a
//! tape leaf (`bind`) and the optimizer writes updated values back by id.
//! Iteration order is insertion order everywhere, which keeps initialization,
//! checkpoints, and update sweeps deterministic. Non-trainable entries hold
//! state like batchnorm running statistics: they are checkpointed but skipped
//! by the optimizer and excluded from parameter counts.

use crate::tensor::checkpoint::{AnyTensor, IntoAny};
use crate::tensor::{Element, Tape, Tensor, Var};
use crate::{Error, Result};
use rand::Rng;
use std::collections::HashMap;

pub type ParamId = usize;

#[derive(Debug, Clone)]
pub struct ParamEntry<E: Element> {
    pub name: String,
    pub value: Tensor<E>,
    pub trainable: bool,
}

#[derive(Debug, Clone)]
pub struct ParamStore<E: Element> {
    entries: Vec<ParamEntry<E>>,
    by_name: HashMap<String, ParamId>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, trainable });
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<E>) {
        assert_eq!(self.entries[id].value.shape(), value.shape(), "parameter shape change");
        self.entries[id].value = value;
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<E>] {
        &self.entries
    }

    /// Total trainable scalar count (the "#Param" number).
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    /// Leafs every parameter onto the tape in store order.
    pub fn bind(&self, tape: &mut Tape<E>) -> Bound {
        Bound { vars: self.entries.iter().map(|e| tape.leaf(e.value.clone())).collect() }
    }

    /// Binds with caller-supplied leaves for the trainable entries, in store
    /// order; non-trainable entries still leaf their stored values. This is
    /// the splice point that lets a finite-difference sweep own every weight
    /// of a model while the running statistics stay fixed.
    pub fn bind_spliced(&self, tape: &mut Tape<E>, trainable: &[Var]) -> Result<Bound> {
        let want = self.entries.iter().filter(|e| e.trainable).count();
        if trainable.len() != want {
            return Err(Error::Invalid(format!(
                "bind_spliced got {} vars for {want} trainable entries",
                trainable.len()
            )));
        }
        let mut next = trainable.iter().copied();
        let vars = self
            .entries
            .iter()
            .map(|e| if e.trainable { next.next().unwrap() } else { tape.leaf(e.value.clone()) })
            .collect();
        Ok(Bound { vars })
    }

    pub fn to_checkpoint(&self) -> Vec<(String, AnyTensor)>
    where
        E: IntoAny,
    {
        self.entries.iter().map(|e| (e.name.clone(), E::wrap(e.value.clone()))).collect()
    }

    /// Restores values by name. Every store entry must be present with the
    /// same dtype and shape; unknown names in the checkpoint are an error.
    pub fn load_checkpoint(&mut self, entries: Vec<(String, AnyTensor)>) -> Result<()>
    where
        E: IntoAny,
    {
        if entries.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, store expects {}",
                entries.len(),
                self.entries.len()
            )));
        }
        for (name, any) in entries {
            let id = self
                .lookup(&name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor {name} in checkpoint")))?;
            let shape = any.shape().to_vec();
            let t = E::unwrap(any).ok_or_else(|| {
                Error::Format(format!("tensor {name} has wrong dtype for this model"))
            })?;
            if t.shape() != self.entries[id].value.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} shape {shape:?} != expected {:?}",
                    self.entries[id].value.shape()
                )));
            }
            self.entries[id].value = t;
        }
        Ok(())
    }
}

/// Tape bindings for one forward pass, parallel to the store's entries.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id]
    }
}

/// Kaiming-uniform fill: U(−√(6/fan_in), √(6/fan_in)).
pub fn kaiming<E: Element, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<E> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| E::from_f64(rng.gen_range(-bound..bound)))
}
