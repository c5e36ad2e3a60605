//! Named parameter storage and per-forward binding to graph leaves.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Initial values for a new parameter.
#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Const(f32),
    Values(Vec<f32>),
    /// Uniform in `[−bound, bound)`.
    Uniform(f32),
    Normal(f32),
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub frozen: bool,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// All parameters of a model, in creation order. Initialization draws from a
/// seeded generator owned by the store, so two stores built with the same
/// seed and the same sequence of `add` calls are identical.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: Vec<Param>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self { params: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Register a parameter. Rank ≥ 2 parameters are weight-decayed by default.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter name {name}");
        let n: usize = shape.iter().product();
        let value = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Values(v) => {
                assert_eq!(v.len(), n, "initial values for {name} have the wrong length");
                v
            }
            Init::Uniform(bound) => {
                let d = Uniform::new(-bound, bound).expect("positive bound");
                (0..n).map(|_| d.sample(&mut self.rng)).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| d.sample(&mut self.rng)).collect()
            }
        };
        self.params.push(Param { name: name.to_string(), shape: shape.to_vec(), value, frozen: false, decay: shape.len() >= 2 });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &[f32] {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Vec<f32>) -> Result<()> {
        let p = &mut self.params[id.0];
        if value.len() != p.value.len() {
            return Err(shape_err!("{} holds {} values, got {}", p.name, p.value.len(), value.len()));
        }
        p.value = value;
        Ok(())
    }

    pub fn set_decay(&mut self, id: ParamId, decay: bool) {
        self.params[id.0].decay = decay;
    }

    /// Freeze or unfreeze every parameter whose name starts with `prefix`;
    /// returns how many matched.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
            n += 1;
        }
        n
    }

    pub fn set_all_frozen(&mut self, frozen: bool) {
        self.params.iter_mut().for_each(|p| p.frozen = frozen);
    }

    /// Number of scalar values that would be updated by training.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(Param::numel).sum()
    }

    /// Fresh graph leaves for one forward pass. With `train`, non-frozen
    /// parameters require gradients.
    pub fn bind(&self, train: bool) -> Binding {
        let tensors = self
            .params
            .iter()
            .map(|p| {
                if train && !p.frozen {
                    Tensor::param(&p.shape, p.value.clone())
                } else {
                    Tensor::new(&p.shape, p.value.clone())
                }
                .expect("parameter shapes are validated on insertion")
            })
            .collect();
        Binding { tensors }
    }

    /// Copy values for every name present in both stores.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for p in &mut self.params {
            if let Some(src) = other.params.iter().find(|q| q.name == p.name) {
                if src.shape != p.shape {
                    return Err(Error::Config(format!("{}: stored shape {:?} != {:?}", p.name, src.shape, p.shape)));
                }
                p.value.clone_from(&src.value);
                n += 1;
            }
        }
        Ok(n)
    }
}

/// Parameters bound as tensors for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct Binding {
    tensors: Vec<Tensor>,
}

impl Binding {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    /// The same binding with one parameter replaced.
    pub fn with(&self, id: ParamId, t: Tensor) -> Binding {
        let mut tensors = self.tensors.clone();
        tensors[id.0] = t;
        Binding { tensors }
    }

    /// Gradients accumulated by the last backward pass, by parameter index.
    pub fn grads(&self) -> Vec<Option<Vec<f32>>> {
        self.tensors.iter().map(Tensor::grad).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values() {
        let build = || {
            let mut s = ParamStore::new(9);
            s.add("a", &[3, 2], Init::Uniform(0.5));
            s.add("b", &[4], Init::Normal(1.0));
            s
        };
        let (x, y) = (build(), build());
        for (p, q) in x.params().iter().zip(y.params()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn frozen_parameters_do_not_require_grad() {
        let mut s = ParamStore::new(0);
        let a = s.add("enc.w", &[2, 2], Init::Const(1.0));
        let b = s.add("head.w", &[2], Init::Zeros);
        assert_eq!(s.set_frozen_prefix("enc.", true), 1);
        let bind = s.bind(true);
        assert!(!bind.get(a).requires_grad());
        assert!(bind.get(b).requires_grad());
        assert_eq!(s.trainable_count(), 2);
        assert!(!s.bind(false).get(b).requires_grad());
    }

    #[test]
    fn decay_defaults_by_rank() {
        let mut s = ParamStore::new(0);
        let w = s.add("w", &[2, 2], Init::Zeros);
        let b = s.add("b", &[2], Init::Zeros);
        assert!(s.get(w).decay);
        assert!(!s.get(b).decay);
    }
}
