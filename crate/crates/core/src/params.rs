//! Named parameter storage shared by every learnable component.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Mat, Real};

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
    pub value: Mat<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Mat<T>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let id = self.entries.len();
        self.index.insert(name.to_string(), id);
        self.entries.push(ParamEntry { name: name.to_string(), value });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Mat<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast() }).collect(),
            index: self.index.clone(),
        }
    }

    /// Largest element-wise difference between two stores with the same layout.
    pub fn max_abs_diff(&self, other: &ParamStore<T>) -> f64 {
        assert_eq!(self.len(), other.len());
        self.entries.iter().zip(&other.entries).map(|(a, b)| a.value.max_abs_diff(&b.value)).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Normal with std `gain / sqrt(rows)`; rows is the fan-in for `x * W` layouts.
    FanIn(f64),
    Normal(f64),
    /// Identity on the leading square block, zero elsewhere.
    Identity,
    Value(Vec<f64>),
}

/// Registers parameters with deterministic initial values drawn from one seeded stream.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        ParamBuilder { store, rng: ChaCha8Rng::seed_from_u64(seed), prefix: String::new() }
    }

    pub fn set_prefix(&mut self, prefix: &str) {
        self.prefix = prefix.to_string();
    }

    pub fn param(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> ParamId {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        let value = match init {
            Init::Zeros => Mat::zeros(rows, cols),
            Init::Const(v) => Mat::filled(rows, cols, T::from_f64(v)),
            Init::FanIn(gain) => self.normal(rows, cols, gain / (rows.max(1) as f64).sqrt()),
            Init::Normal(std) => self.normal(rows, cols, std),
            Init::Identity => Mat::from_fn(rows, cols, |r, c| if r == c { T::one() } else { T::zero() }),
            Init::Value(v) => Mat::from_f64(rows, cols, &v),
        };
        self.store.insert(&full, value)
    }

    fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Mat<T> {
        let dist = Normal::new(0.0, std.max(0.0)).expect("finite std");
        let rng = &mut self.rng;
        Mat::from_fn(rows, cols, |_, _| T::from_f64(dist.sample(rng)))
    }
}
