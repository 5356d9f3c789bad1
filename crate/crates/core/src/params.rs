//! Named parameter storage.
//!
//! Layers hold [`ParamId`] handles instead of tensors. A [`ParamStore`] owns
//! the values; [`ParamStore::bind`] places all of them on a tape for one
//! forward/backward pass. Anything implementing [`ParamSink`] can stand in for
//! the store while a model is being described, which lets the shape-only
//! [`ShapeLedger`] count parameters without allocating them.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{serialize, Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    /// Normal with std `1/√fan_in`.
    FanIn(usize),
}

pub trait ParamSink {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId;
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Replaces a value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.tensors[id.0];
        if slot.shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Global L2 norm of the gradients of every parameter.
    pub fn grad_norm(&self, bound: &Bound<'_>, grads: &Gradients) -> f64 {
        bound
            .vars
            .iter()
            .map(|v| grads.get(v).data().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Plain gradient-descent step: `θ ← θ − lr·∇θ`.
    pub fn sgd_step(&mut self, bound: &Bound<'_>, grads: &Gradients, lr: f64) -> Result<()> {
        for (slot, var) in self.tensors.iter_mut().zip(&bound.vars) {
            let g = grads.get(var);
            *slot = slot.zip_map(&g, |w, d| w - lr * d)?;
        }
        Ok(())
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        serialize::save_weights(path, &self.to_named())
    }

    /// Overwrites every parameter from a container written by [`ParamStore::save`].
    pub fn load_into(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let loaded = serialize::load_weights(path)?;
        if loaded.len() != self.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, container has {}",
                self.len(),
                loaded.len()
            )));
        }
        for (name, t) in loaded {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Format(format!("unknown tensor {name}")))?;
            self.set(id, t)?;
        }
        Ok(())
    }

    /// True when both stores hold the same names, shapes and bit patterns.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bit_eq(b))
    }
}

impl ParamSink for ParamStore {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Normal(std) => Tensor::randn(shape, std, &mut self.rng),
            Init::FanIn(fan_in) => Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), &mut self.rng),
        };
        let id = self.tensors.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.tensors.push(value);
        ParamId(id)
    }
}

/// Records parameter names and shapes without allocating values.
#[derive(Debug, Clone, Default)]
pub struct ShapeLedger {
    pub entries: Vec<(String, Vec<usize>)>,
}

impl ShapeLedger {
    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

impl ParamSink for ShapeLedger {
    fn param(&mut self, name: &str, shape: &[usize], _init: Init) -> ParamId {
        self.entries.push((name.to_string(), shape.to_vec()));
        ParamId(self.entries.len() - 1)
    }
}

/// Every parameter of a store placed on one tape.
#[derive(Debug, Clone)]
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ledger_and_store_agree() {
        let mut store = ParamStore::new(0);
        let mut ledger = ShapeLedger::default();
        for sink in [&mut store as &mut dyn ParamSink, &mut ledger] {
            sink.param("a", &[3, 4], Init::FanIn(3));
            sink.param("b", &[4], Init::Zeros);
        }
        assert_eq!(store.num_params(), 16);
        assert_eq!(ledger.num_params(), 16);
        assert_eq!(store.get(store.id("b").unwrap()).data(), &[0.0; 4]);
    }

    #[test]
    fn same_seed_same_values() {
        let mk = || {
            let mut s = ParamStore::new(9);
            s.param("w", &[5], Init::Normal(1.0));
            s
        };
        assert!(mk().bit_eq(&mk()));
    }

    #[test]
    fn save_load_round_trip() {
        let mut a = ParamStore::new(1);
        a.param("w", &[2, 3], Init::Normal(1.0));
        a.param("b", &[3], Init::Normal(1.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        a.save(&path).unwrap();
        let mut b = ParamStore::new(2);
        b.param("w", &[2, 3], Init::Zeros);
        b.param("b", &[3], Init::Zeros);
        b.load_into(&path).unwrap();
        assert!(a.bit_eq(&b));
    }
}
