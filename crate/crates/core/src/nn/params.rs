use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::SeedSource;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State carried alongside the weights (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Ordered, named collection of every tensor a model owns.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn insert(&mut self, name: String, value: Tensor, kind: ParamKind) -> Result<ParamId> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.entries.push(ParamEntry { name, value, kind });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.entries[id.0].kind == ParamKind::Trainable)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                entry.name,
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable_ids().map(|id| self.get(id).numel()).sum()
    }

    /// Zeroes every trainable tensor whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if e.kind == ParamKind::Trainable && e.name.starts_with(prefix) {
                e.value.data_mut().fill(0.0);
                n += 1;
            }
        }
        n
    }

    pub fn apply_running_updates(&mut self, updates: Vec<(ParamId, Tensor)>) -> Result<()> {
        for (id, value) in updates {
            self.set(id, value)?;
        }
        Ok(())
    }
}

/// How a new tensor is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
    /// Normal resampled until it falls inside two standard deviations.
    TruncatedNormal { std: f64 },
}

impl Init {
    fn fill(self, shape: &[usize], rng: &mut crate::rng::Rng) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Normal { std } => {
                let normal = Normal::new(0.0, std).expect("std is finite and non-negative");
                Tensor::from_fn(shape, |_| normal.sample(rng))
            }
            Init::TruncatedNormal { std } => {
                let normal = Normal::new(0.0, 1.0).expect("unit normal");
                Tensor::from_fn(shape, |_| loop {
                    let z: f64 = normal.sample(rng);
                    if z.abs() <= 2.0 {
                        break z * std;
                    }
                })
            }
        }
    }
}

/// Registers named parameters under a hierarchical prefix.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
    seeds: SeedSource,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, seeds: SeedSource) -> Self {
        Self {
            store,
            prefix: String::new(),
            seeds,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Child builder with `name` appended to the prefix.
    pub fn pp(&mut self, name: impl AsRef<str>) -> Builder<'_> {
        Builder {
            prefix: self.full_name(name.as_ref()),
            store: self.store,
            seeds: self.seeds,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let full = self.full_name(name);
        // each tensor draws from its own stream so construction order does not matter
        let mut rng = self.seeds.stream(&full);
        let value = init.fill(shape, &mut rng);
        self.store.insert(full, value, ParamKind::Trainable)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.insert(full, value, ParamKind::Buffer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a fresh graph, the parameters it reads, and any
/// running-statistic updates produced in training mode.
pub struct Ctx<'s> {
    pub graph: Graph,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    running_updates: Vec<(ParamId, Tensor)>,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            running_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Graph variable for a parameter; bound once per pass.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = self.store.entry(id);
        let v = self
            .graph
            .leaf(entry.value.clone(), entry.kind == ParamKind::Trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub(crate) fn push_running_update(&mut self, id: ParamId, value: Tensor) {
        self.running_updates.push((id, value));
    }

    pub fn take_running_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.running_updates)
    }

    /// Gradient of every trainable parameter after [`Graph::backward`];
    /// parameters the pass never touched get zeros.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.store
            .trainable_ids()
            .map(|id| {
                let g = self.bound[id.0]
                    .and_then(|v| self.graph.grad(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape()));
                (id, g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_names_and_duplicates() {
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, SeedSource::new(0));
        let mut enc = b.pp("encoder");
        enc.pp("conv").param("weight", &[2, 2], Init::Ones).unwrap();
        assert!(enc.pp("conv").param("weight", &[2, 2], Init::Ones).is_err());
        assert_eq!(store.entries()[0].name, "encoder.conv.weight");
    }

    #[test]
    fn init_is_order_independent() {
        let build = |order: &[&str]| {
            let mut store = ParamStore::new();
            let mut b = Builder::new(&mut store, SeedSource::new(3));
            for n in order {
                b.param(n, &[4], Init::TruncatedNormal { std: 0.02 }).unwrap();
            }
            store
        };
        let a = build(&["x", "y"]);
        let b = build(&["y", "x"]);
        assert_eq!(a.get(a.find("x").unwrap()), b.get(b.find("x").unwrap()));
        assert!(a.get(a.find("y").unwrap()).data().iter().all(|v| v.abs() <= 0.04));
    }
}
