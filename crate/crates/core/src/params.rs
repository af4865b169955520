//! Named parameter storage shared between tapes, and the initialisers.

use std::sync::Arc;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    pub value: Arc<Tensor<T>>,
    pub trainable: bool,
}

/// Ordered map of named parameters. Iteration order is insertion order,
/// which fixes checkpoint layout and optimizer update order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar = f32> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        self.entries.insert(
            name.into(),
            Param {
                value: Arc::new(value),
                trainable,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|p| p.value.as_ref())
    }

    pub(crate) fn get_shared(&self, name: &str) -> Option<(Arc<Tensor<T>>, bool)> {
        self.entries.get(name).map(|p| (p.value.clone(), p.trainable))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.trainable)
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// Mutable access for optimizer updates and tests. Clones the buffer
    /// only if a tape still holds a reference to it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|p| Arc::make_mut(&mut p.value))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, trainable: bool) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable == trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, p) in &self.entries {
            out.insert(name.clone(), p.value.cast(), p.trainable);
        }
        out
    }
}

/// Per-parameter gradient buffers keyed by name.
#[derive(Clone, Debug, Default)]
pub struct Grads<T: Scalar = f32> {
    pub entries: IndexMap<String, Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn from_pairs(pairs: Vec<(String, Vec<T>)>) -> Self {
        Self {
            entries: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.entries.get(name).map(Vec::as_slice)
    }

    /// Adds `other` into `self`, in `other`'s key order.
    pub fn add(&mut self, other: &Grads<T>) {
        for (name, g) in &other.entries {
            match self.entries.get_mut(name) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                None => {
                    self.entries.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in self.entries.values_mut() {
            g.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn global_norm(&self) -> T {
        self.entries
            .values()
            .flat_map(|g| g.iter())
            .fold(T::zero(), |a, &v| a + v * v)
            .sqrt()
    }
}

/// Seeded parameter initialiser.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..=bound)))
    }

    /// Kaiming-uniform for ReLU networks: `U(−√(6/fan_in), √(6/fan_in))`.
    pub fn kaiming<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.uniform(shape, (6.0 / fan_in as f64).sqrt())
    }

    /// Glorot-uniform: `U(−√(6/(fan_in+fan_out)), …)`.
    pub fn xavier<T: Scalar>(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
        self.uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
    }

    pub fn zeros<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::zeros(shape)
    }

    pub fn ones<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::full(shape, T::one())
    }
}
