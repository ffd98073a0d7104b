//! Named parameter storage and the per-forward [`Session`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::norm::{update_running, BatchStats};
use crate::real::Real;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<R: Real> {
    pub name: String,
    pub value: Tensor<R>,
    /// Buffers (running statistics) are stored and checkpointed but never optimized.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<R: Real = f32> {
    entries: Vec<ParamEntry<R>>,
    index: HashMap<String, usize>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<R>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<R> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<R> {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<R>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<R>] {
        &self.entries
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Total element count of trainable tensors.
    pub fn count_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<R>) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!("{}: {:?} vs {:?}", slot.name, slot.value.shape(), value.shape()),
            ));
        }
        slot.value = value;
        Ok(())
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) {
        for u in updates {
            let mut mean = std::mem::replace(&mut self.entries[u.mean.0].value, Tensor::zeros(&[0]));
            let mut var = std::mem::replace(&mut self.entries[u.var.0].value, Tensor::zeros(&[0]));
            update_running(&mut mean, &mut var, &u.stats, u.momentum);
            self.entries[u.mean.0].value = mean;
            self.entries[u.var.0].value = var;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats,
    pub momentum: f64,
}

/// One forward evaluation: a fresh tape plus bindings from parameters to leaves.
///
/// The store is only borrowed immutably; running-statistic updates are collected
/// and applied by the caller after the step.
pub struct Session<'a, R: Real = f32> {
    pub tape: Tape<R>,
    store: &'a ParamStore<R>,
    bound: Vec<Option<Var>>,
    training: bool,
    grad_enabled: bool,
    dropout_seed: u64,
    dropout_calls: u64,
    stat_updates: Vec<StatUpdate>,
}

impl<'a, R: Real> Session<'a, R> {
    pub fn new(store: &'a ParamStore<R>, training: bool, grad_enabled: bool, dropout_seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            training,
            grad_enabled,
            dropout_seed,
            dropout_calls: 0,
            stat_updates: Vec::new(),
        }
    }

    pub fn inference(store: &'a ParamStore<R>) -> Self {
        Self::new(store, false, false, 0)
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore<R> {
        self.store
    }

    /// Leaf bound to a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let requires = self.grad_enabled && self.store.is_trainable(id);
        let v = self.tape.leaf(self.store.get(id).clone(), requires);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor<R>) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        self.tape.value(v)
    }

    pub fn next_dropout_seed(&mut self) -> u64 {
        self.dropout_calls += 1;
        self.dropout_seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(self.dropout_calls)
    }

    pub fn push_stat_update(&mut self, update: StatUpdate) {
        self.stat_updates.push(update);
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Gradients of every bound trainable parameter after [`Tape::backward`].
    pub fn param_grads(&self, grads: &mut Gradients<R>) -> Vec<(ParamId, Tensor<R>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                grads.take(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }
}
