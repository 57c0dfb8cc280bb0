//! Named, ordered tensor collections and seeded initialization.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::nn::{ConvSpec, RunningStats};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Tensors keyed by unique name; iteration order is insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

/// Learnable tensors of a model.
pub type ModelParams = ParamStore;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::config(format!("duplicate tensor name `{name}`")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::config(format!("missing tensor `{name}`")))
    }

    /// Overwrites an existing entry, keeping its position.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("missing tensor `{name}`")))?;
        if slot.shape() != tensor.shape() {
            return Err(Error::shape(format!(
                "`{name}` has shape {}, replacement has {}",
                slot.shape(),
                tensor.shape()
            )));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Registers every tensor on `tape` as a learnable leaf, in order.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let vars = self
            .entries
            .iter()
            .map(|(name, t)| (name.clone(), tape.param(name.clone(), t.clone())))
            .collect();
        ParamVars { vars }
    }

    /// Registers every tensor as a constant (inference without gradients).
    pub fn register_frozen(&self, tape: &mut Tape) -> ParamVars {
        let vars = self
            .entries
            .iter()
            .map(|(name, t)| (name.clone(), tape.constant(t.clone())))
            .collect();
        ParamVars { vars }
    }

    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.len() == other.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }
}

/// Tape handles for a registered [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("parameter `{name}` is not registered")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Seeded parameter factory: Kaiming-uniform conv weights, zero biases,
/// unit/zero norm affine terms.
pub struct Initializer {
    rng: Xoshiro256PlusPlus,
    pub params: ParamStore,
    pub buffers: ParamStore,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
            params: ParamStore::new(),
            buffers: ParamStore::new(),
        }
    }

    pub fn kaiming_uniform(&mut self, shape: Shape, fan_in: usize) -> Tensor {
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..shape.numel())
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        Tensor::from_vec(shape, data).expect("numel matches")
    }

    /// Registers `{name}.w` and, if the spec has one, `{name}.b`.
    pub fn conv(&mut self, name: &str, spec: &ConvSpec) -> Result<()> {
        spec.validate()?;
        let ws = spec.weight_shape();
        let fan_in = ws.c * ws.h * ws.w;
        let w = self.kaiming_uniform(ws, fan_in);
        self.params.insert(format!("{name}.w"), w)?;
        if spec.has_bias {
            self.params
                .insert(format!("{name}.b"), Tensor::zeros(spec.bias_shape()))?;
        }
        Ok(())
    }

    /// Registers `{name}.gamma`, `{name}.beta` and the running-stat buffers.
    pub fn batchnorm(&mut self, name: &str, channels: usize) -> Result<()> {
        let stats = RunningStats::new(channels);
        self.params
            .insert(format!("{name}.gamma"), Tensor::ones(stats.mean.shape()))?;
        self.params
            .insert(format!("{name}.beta"), Tensor::zeros(stats.mean.shape()))?;
        self.buffers.insert(format!("{name}.mean"), stats.mean)?;
        self.buffers.insert(format!("{name}.var"), stats.var)?;
        Ok(())
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.params.insert(name, value)
    }

    pub fn finish(self) -> (ParamStore, ParamStore) {
        (self.params, self.buffers)
    }
}

/// Uniform samples in `[lo, hi)`; used by tests and checks for random inputs.
pub fn random_tensor(shape: Shape, lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("numel matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_and_uniqueness() {
        let mut p = ParamStore::new();
        p.insert("b", Tensor::scalar(1.0)).unwrap();
        p.insert("a", Tensor::scalar(2.0)).unwrap();
        assert!(p.insert("a", Tensor::scalar(3.0)).is_err());
        assert_eq!(p.names().collect::<Vec<_>>(), ["b", "a"]);
    }

    #[test]
    fn initializer_is_seeded() {
        let spec = ConvSpec::same(3, 4, 3, 1, 1, true);
        let mut a = Initializer::new(9);
        let mut b = Initializer::new(9);
        a.conv("c", &spec).unwrap();
        b.conv("c", &spec).unwrap();
        assert!(a.params.bit_eq(&b.params));
        let w = a.params.get("c.w").unwrap();
        let bound = (6.0f64 / 27.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() < bound));
        assert!(a
            .params
            .get("c.b")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(a.params.scalar_count(), spec.param_count());
    }
}
