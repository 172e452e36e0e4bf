//! Named parameter storage and the small layers the model is assembled from.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Ordered collection of named, trainable tensors.
///
/// Insertion order is the iteration order, and names are unique, so two
/// models built from the same configuration enumerate identical names.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Scalar = f64> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: BTreeMap<String, usize>,
}

/// Tape handles for every parameter of a store, valid for one tape.
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl std::ops::Index<ParamId> for Bindings {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<S>> {
        self.id(name).map(|id| self.get(id))
    }

    /// Overwrites a parameter's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, values: Tensor<S>) -> Result<()> {
        let slot = &mut self.tensors[id.0];
        if slot.shape() != values.shape() {
            return Err(Error::dim(
                "ParamStore::set",
                format!(
                    "{} has shape {:?}, got {:?}",
                    self.names[id.0],
                    slot.shape(),
                    values.shape()
                ),
            ));
        }
        *slot = values.with_grad();
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Records every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<S>) -> Bindings {
        Bindings {
            vars: self.tensors.iter().map(|t| tape.leaf(t)).collect(),
        }
    }

    /// Records every parameter as a constant, for inference.
    pub fn bind_detached(&self, tape: &mut Tape<S>) -> Bindings {
        Bindings {
            vars: self.tensors.iter().map(|t| tape.leaf_detached(t)).collect(),
        }
    }

    /// Adds the gradients from a finished backward pass into the store.
    pub fn accumulate(&mut self, tape: &Tape<S>, bind: &Bindings) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bind.vars) {
            tape.accumulate_into(v, t)?;
        }
        Ok(())
    }

    /// Adds another store's gradients (same layout) into this one.
    pub fn add_grads_from(&mut self, other: &ParamStore<S>) -> Result<()> {
        for (mine, theirs) in self.tensors.iter_mut().zip(&other.tensors) {
            if let Some(g) = theirs.grad() {
                mine.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn normal_tensor<S: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<S> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| S::lit(dist.sample(rng)))
}

/// Affine layer `y = x·Wᵀ + b`, weight shape `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let std = 1.0 / (d_in as f64).sqrt();
        Ok(Linear {
            weight: store.insert(format!("{name}.weight"), normal_tensor(rng, &[d_out, d_in], std))?,
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[d_out]))?,
            d_in,
            d_out,
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bind: &Bindings, x: Var) -> Result<Var> {
        tape.linear(x, bind[self.weight], Some(bind[self.bias]))
    }
}

/// Layer normalization over the last axis with learnable scale and shift.
#[derive(Debug, Clone)]
pub struct Norm {
    pub scale: ParamId,
    pub shift: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Norm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d: usize) -> Result<Self> {
        Ok(Norm {
            scale: store.insert(format!("{name}.scale"), Tensor::full(&[d], S::one()))?,
            shift: store.insert(format!("{name}.shift"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bind: &Bindings, x: Var) -> Result<Var> {
        tape.layer_norm(x, bind[self.scale], bind[self.shift], S::lit(LAYER_NORM_EPS))
    }
}

/// Two affine layers with a GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
    ) -> Result<Self> {
        Ok(Mlp {
            hidden: Linear::new(store, rng, &format!("{name}.fc1"), d_in, d_hidden)?,
            out: Linear::new(store, rng, &format!("{name}.fc2"), d_hidden, d_out)?,
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bind: &Bindings, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, bind, x)?;
        let h = tape.gelu(h)?;
        self.out.forward(tape, bind, h)
    }
}

/// Single-head scaled dot-product attention with input and output projections.
#[derive(Debug, Clone)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub d: usize,
}

impl Attention {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        d: usize,
    ) -> Result<Self> {
        Ok(Attention {
            query: Linear::new(store, rng, &format!("{name}.q"), d, d)?,
            key: Linear::new(store, rng, &format!("{name}.k"), d, d)?,
            value: Linear::new(store, rng, &format!("{name}.v"), d, d)?,
            out: Linear::new(store, rng, &format!("{name}.o"), d, d)?,
            d,
        })
    }

    /// `q: (n, d)`, `k, v: (m, d)` → `(n, d)`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bind: &Bindings, q: Var, k: Var, v: Var) -> Result<Var> {
        let q = self.query.forward(tape, bind, q)?;
        let k = self.key.forward(tape, bind, k)?;
        let v = self.value.forward(tape, bind, v)?;
        // q·kᵀ is exactly a bias-free affine map of q by k
        let scores = tape.linear(q, k, None)?;
        let scores = tape.scale(scores, S::one() / S::lit(self.d as f64).sqrt())?;
        let weights = tape.softmax(scores, 1)?;
        let mixed = tape.matmul(weights, v)?;
        self.out.forward(tape, bind, mixed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Linear::new(&mut store, &mut rng, "a", 2, 3).unwrap();
        assert!(Linear::new(&mut store, &mut rng, "a", 2, 3).is_err());
        let names: Vec<_> = store.iter().map(|(n, _)| n.to_owned()).collect();
        assert_eq!(names, ["a.weight", "a.bias"]);
        assert_eq!(store.scalar_count(), 9);
    }

    #[test]
    fn attention_rows_mix_values() {
        // with identity projections and equal keys, attention averages the values
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let att = Attention::new(&mut store, &mut rng, "att", 2).unwrap();
        for lin in [&att.query, &att.key, &att.value, &att.out] {
            store.set(lin.weight, Tensor::eye(2)).unwrap();
        }
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let q = tape.leaf(&Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
        let k = tape.leaf(&Tensor::new(&[2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
        let v = tape.leaf(&Tensor::new(&[2, 2], vec![2.0, 0.0, 0.0, 4.0]).unwrap());
        let out = att.forward(&mut tape, &bind, q, k, v).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0]);
    }
}
