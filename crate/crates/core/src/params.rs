//! Named parameter storage and per-forward binding onto a tape.

use std::cell::RefCell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which part of the detector a parameter belongs to. Two-phase training
/// and backbone freezing select by group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Backbone,
    Stage(usize),
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: Group,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform init in `±sqrt(3/fan_in)` (unit-gain variance scaling).
    pub fn kaiming<R: Rng>(
        &mut self,
        name: impl Into<String>,
        group: Group,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (3.0 / fan_in.max(1) as f64).sqrt();
        self.add(name, group, Tensor::uniform(shape, bound, rng))
    }

    pub fn zeros(&mut self, name: impl Into<String>, group: Group, shape: &[usize]) -> ParamId {
        self.add(name, group, Tensor::zeros(shape))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::InvalidArgument(format!(
                "param {}: shape {:?} vs {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn num_scalars_in(&self, pred: impl Fn(Group) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|e| pred(e.group))
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn zero_all(&mut self) {
        for e in &mut self.entries {
            e.value = Tensor::zeros(e.value.shape());
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }
}

/// Binds a [`ParamStore`] onto a tape for one forward pass. Each parameter
/// becomes at most one leaf; parameters whose group is frozen are recorded
/// as constants.
pub struct Graph<'t, T> {
    tape: &'t Tape<T>,
    store: &'t ParamStore<T>,
    bound: RefCell<Vec<Option<Var<'t, T>>>>,
    trainable: Box<dyn Fn(Group) -> bool + 't>,
}

impl<'t, T: Scalar> Graph<'t, T> {
    pub fn new(tape: &'t Tape<T>, store: &'t ParamStore<T>) -> Self {
        Self::with_trainable(tape, store, |_| true)
    }

    pub fn with_trainable(
        tape: &'t Tape<T>,
        store: &'t ParamStore<T>,
        trainable: impl Fn(Group) -> bool + 't,
    ) -> Self {
        Graph {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            trainable: Box::new(trainable),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore<T> {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let entry = &self.store.entries[id.0];
        let v = if (self.trainable)(entry.group) {
            self.tape.leaf(entry.value.clone())
        } else {
            self.tape.constant(entry.value.clone())
        };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn input(&self, value: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(value)
    }

    /// Gradient per parameter, indexed like the store. Unbound or frozen
    /// parameters, and those that did not reach the root, get `None`.
    pub fn collect(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.bound
            .borrow()
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect()
    }
}
