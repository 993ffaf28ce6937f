//! Named parameter storage and the per-forward context that exposes
//! parameters as tape variables.

use std::cell::RefCell;
use std::collections::HashMap;

use gapnet_tensor::nn::BatchStats;
use gapnet_tensor::{Real, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Weight,
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl Role {
    /// Learned by the optimizer (running statistics are not).
    pub fn trainable(self) -> bool {
        !matches!(self, Role::RunningMean | Role::RunningVar)
    }
}

#[derive(Debug, Clone)]
pub struct Entry<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub role: Role,
}

/// Flat, insertion-ordered set of named tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: String, value: Tensor<T>, role: Role) -> ParamId {
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry { name, value, role });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &Entry<T> {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.entry(id).role.trainable()).collect()
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.role.trainable() && e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    /// Sets every learned tensor under `prefix` to zero.
    pub fn zero_learned(&mut self, prefix: &str) {
        for e in &mut self.entries {
            if e.role.trainable() && e.name.starts_with(prefix) {
                e.value = Tensor::zeros(e.value.shape());
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    role: e.role,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Every tensor (including running statistics) by name, in insertion order.
    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.clone(), e.value.clone())).collect()
    }

    /// Replaces values from named tensors. Every stored tensor must be
    /// present with a matching shape; extra names are rejected.
    pub fn load_named(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        let mut seen = vec![false; self.entries.len()];
        for (name, t) in tensors {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            let e = &mut self.entries[id.0];
            if e.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = t.clone();
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!("missing tensor {}", self.entries[i].name)));
        }
        Ok(())
    }

    /// Replaces the stored tensors named in `tensors`, leaving the rest
    /// untouched. Unknown names and shape mismatches fail. Returns how many
    /// stored tensors were not covered.
    pub fn load_subset(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<usize> {
        for (name, t) in tensors {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            if self.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.get(id).shape()
                )));
            }
        }
        for (name, t) in tensors {
            let id = self.id(name).expect("checked above");
            *self.get_mut(id) = t.clone();
        }
        Ok(self.len() - tensors.len())
    }

    /// Applies the running-statistics updates gathered during a train-mode forward.
    pub fn apply_batch_stats(&mut self, updates: Vec<StatsUpdate<T>>, momentum: f64) {
        for u in updates {
            let mut mean = self.get(u.mean).clone();
            let mut var = self.get(u.var).clone();
            u.stats.update_running(&mut mean, &mut var, momentum);
            *self.get_mut(u.mean) = mean;
            *self.get_mut(u.var) = var;
        }
    }
}

/// Deterministic initializer that registers parameters under a dotted name prefix.
pub struct Builder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A builder whose names are nested under `name`.
    pub fn sub(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Zero-mean normal weights with standard deviation `std`.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, role: Role) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(shape, |_| T::lit(dist.sample(self.rng)));
        self.store.add(self.full_name(name), t, role)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, role: Role) -> ParamId {
        self.store.add(self.full_name(name), Tensor::full(shape, T::lit(value)), role)
    }
}

/// Seeded generator used for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A running-statistics update collected during a train-mode forward.
#[derive(Debug, Clone)]
pub struct StatsUpdate<T: Real> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats<T>,
}

/// State of one forward pass: parameter lookup, optional tape, and mode.
pub struct Ctx<'t, 's, T: Real> {
    store: &'s ParamStore<T>,
    tape: Option<&'t Tape<T>>,
    train: bool,
    leaves: RefCell<HashMap<ParamId, Var<'t, T>>>,
    stats: RefCell<Vec<StatsUpdate<T>>>,
}

impl<'t, 's, T: Real> Ctx<'t, 's, T> {
    /// Tape-free evaluation using running statistics.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self::with_tape(store, None, false)
    }

    /// Recording forward; `train` selects batch statistics for batch norm.
    pub fn with_tape(store: &'s ParamStore<T>, tape: Option<&'t Tape<T>>, train: bool) -> Self {
        Ctx {
            store,
            tape,
            train,
            leaves: RefCell::new(HashMap::new()),
            stats: RefCell::new(Vec::new()),
        }
    }

    pub fn train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// The parameter as a variable; trainable parameters become tape leaves
    /// on first use when a tape is attached.
    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        let entry = self.store.entry(id);
        match self.tape {
            Some(tape) if entry.role.trainable() => self
                .leaves
                .borrow_mut()
                .entry(id)
                .or_insert_with(|| tape.leaf(entry.value.clone()))
                .clone(),
            _ => Var::constant(entry.value.clone()),
        }
    }

    pub fn value(&self, id: ParamId) -> &'s Tensor<T> {
        self.store.get(id)
    }

    pub(crate) fn push_stats(&self, update: StatsUpdate<T>) {
        self.stats.borrow_mut().push(update);
    }

    pub fn take_stats(&self) -> Vec<StatsUpdate<T>> {
        std::mem::take(&mut self.stats.borrow_mut())
    }

    /// Gradients of every parameter that took part in the forward, after
    /// `tape.backward` ran. Parameters without a gradient path are omitted.
    pub fn gradients(&self) -> Vec<(ParamId, Tensor<T>)> {
        let Some(tape) = self.tape else {
            return Vec::new();
        };
        let mut out: Vec<_> = self
            .leaves
            .borrow()
            .iter()
            .filter_map(|(&id, v)| tape.grad(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

pub(crate) fn check_divisible(what: &str, value: usize, by: usize) -> Result<()> {
    if by == 0 || !value.is_multiple_of(by) {
        return Err(invalid(format!("{what} = {value} is not divisible by {by}")));
    }
    Ok(())
}
