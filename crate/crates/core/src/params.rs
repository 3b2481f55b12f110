//! Named parameter storage shared by every module of the model.
//!
//! Modules hold [`ParamId`]s rather than tensors. A forward pass first binds
//! the whole store onto a tape ([`ParamStore::bind`]); after backward the
//! resulting gradients are moved back into the store with
//! [`ParamStore::absorb_grads`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Gradients, Real, Result, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Whether decoupled weight decay applies (false for norms, biases and tokens).
    pub decay: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Tape handles for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor, decay: bool) -> ParamId {
        let tensor = tensor.with_grad();
        self.params.push(Param {
            name: name.into(),
            tensor,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn count_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Records every parameter on `tape`. With `trainable == false` the
    /// parameters enter as constants and receive no gradient.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(&p.tensor)
                } else {
                    tape.constant(p.tensor.shape(), p.tensor.data().to_vec())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    /// Accumulates gradients from a backward pass into each parameter.
    /// Parameters that did not influence the loss get an explicit zero.
    pub fn absorb_grads(&mut self, grads: &mut Gradients, bound: &Bound) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            match grads.take(v) {
                Some(g) => p.tensor.accumulate_grad(&g)?,
                None => {
                    let zeros = vec![0.0; p.tensor.numel()];
                    p.tensor.accumulate_grad(&zeros)?
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }
}

/// Scoped constructor that names parameters `prefix.name` and draws initial
/// values from a seeded generator.
pub struct ParamInit<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamInit<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> ParamInit<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamInit {
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

    pub fn normal(&mut self, name: &str, shape: &[usize], std: Real, decay: bool) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data: Vec<Real> = (0..n).map(|_| dist.sample(self.rng)).collect();
        let t = Tensor::new(shape, data).expect("shape matches data");
        let full = self.full_name(name);
        self.store.push(full, t, decay)
    }

    /// `[fan_in, fan_out]` weight with variance `1 / fan_in`.
    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let std = 1.0 / (fan_in as Real).sqrt();
        self.normal(name, &[fan_in, fan_out], std, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: Real) -> ParamId {
        let full = self.full_name(name);
        self.store.push(full, Tensor::full(shape, value), false)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn uniform_unit(&mut self) -> Real {
        self.rng.random::<Real>()
    }
}
