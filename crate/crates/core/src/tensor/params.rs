use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

/// Named parameter tensors, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<R> {
    entries: BTreeMap<String, Tensor<R>>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<R>) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<R>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<R>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<R>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Copies every entry under `prefix` from `other`, replacing existing ones.
    pub fn merge_prefix(&mut self, other: &ParamStore<R>, prefix: &str) {
        for (k, v) in other.entries.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.entries.retain(|k, _| keep(k));
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    // -- initializers ------------------------------------------------------

    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut (impl Rng + ?Sized)) {
        let t = Tensor::from_fn(shape.to_vec(), |_| {
            let z: f64 = StandardNormal.sample(rng);
            R::from_f64(z * std)
        });
        self.insert(name, t);
    }

    /// Uniform(-b, b) with b = sqrt(6 / (fan_in + fan_out)).
    pub fn init_xavier(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut (impl Rng + ?Sized),
    ) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::from_fn(shape.to_vec(), |_| R::from_f64(rng.random_range(-bound..bound)));
        self.insert(name, t);
    }

    /// Kaiming-uniform for layers followed by a rectifier.
    pub fn init_kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut (impl Rng + ?Sized)) {
        let bound = (3.0 / fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape.to_vec(), |_| R::from_f64(rng.random_range(-bound..bound)));
        self.insert(name, t);
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], v: f64) {
        self.insert(name, Tensor::full(shape.to_vec(), R::from_f64(v)));
    }
}
