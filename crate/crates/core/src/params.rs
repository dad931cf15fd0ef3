//! Named parameter storage shared by the model, optimizer and checkpoints.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Frozen parameters receive no optimizer updates (and no weight decay).
    pub frozen: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            frozen: false,
        });
        Ok(id)
    }

    /// Adds a parameter drawn from N(0, std) with a stream keyed by `(seed, name)`,
    /// so adding or removing other parameters never shifts this one's values.
    pub fn add_normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        seed: u64,
    ) -> Result<ParamId> {
        let value = normal_tensor(shape, std, param_seed(seed, name));
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect()
    }
}

/// FNV-1a over the name, mixed with the run seed.
pub(crate) fn param_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub(crate) fn normal_tensor<T: Scalar>(shape: &[usize], std: f64, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(&mut rng))).collect();
    Tensor::new(shape, data).expect("element count matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_keyed_by_name() {
        let mut a = ParamStore::<f64>::new();
        a.add_normal("w", &[3, 3], 0.006, 7).unwrap();
        let mut b = ParamStore::<f64>::new();
        b.add_normal("other", &[5], 0.006, 7).unwrap();
        b.add_normal("w", &[3, 3], 0.006, 7).unwrap();
        assert_eq!(a.value(a.id("w").unwrap()), b.value(b.id("w").unwrap()));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("x", Tensor::zeros(&[1])).unwrap();
        assert!(s.add("x", Tensor::zeros(&[1])).is_err());
    }
}
