//! Parameter storage and the small layers shared by the blocks.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameters in insertion order.
#[derive(Clone, Default)]
pub struct ParamStore<T: Float = f32> {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor<T>>>,
    index: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {}", name);
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(Arc::new(value));
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total scalar count over all parameters.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter().map(|t| t.as_ref()))
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!(
                    "{}: {:?} -> {:?}",
                    self.names[id.0],
                    self.tensors[id.0].shape(),
                    value.shape()
                ),
            ));
        }
        self.tensors[id.0] = Arc::new(value);
        Ok(())
    }

    /// Mutable access for in-place optimizer updates.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, requires_grad: bool) -> Bound<'t, T> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf_shared(Arc::clone(t), requires_grad))
                .collect(),
        }
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor<f32>)> {
        self.iter().map(|(n, t)| (n.to_string(), t.cast())).collect()
    }

    /// Overwrites every parameter from checkpoint entries. Names and shapes
    /// must match exactly; extra or missing entries are errors.
    pub fn load_entries(&mut self, entries: &[(String, Tensor<f32>)]) -> Result<()> {
        if entries.len() != self.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                entries.len(),
                self.len()
            )));
        }
        for (name, t) in entries {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Format(format!("unexpected checkpoint tensor {}", name)))?;
            self.set(id, t.cast())?;
        }
        Ok(())
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t, T: Float> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Float> Bound<'t, T> {
    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> impl Iterator<Item = (ParamId, Var<'t, T>)> + '_ {
        self.vars.iter().enumerate().map(|(i, &v)| (ParamId(i), v))
    }
}

/// Dense layer over the last axis: `x · W + b`, `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Gaussian(0, `std`) weights and zero bias.
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{}.weight", name), Tensor::randn(&[in_dim, out_dim], std, rng));
        let bias = bias.then(|| store.add(format!("{}.bias", name), Tensor::zeros(&[out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.matmul(p.var(self.weight))?;
        match self.bias {
            Some(b) => y.add(p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{}.weight", name), Tensor::ones(&[dim])),
            beta: store.add(format!("{}.bias", name), Tensor::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward<'t, T: Float>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(p.var(self.gamma), p.var(self.beta), self.eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn store_round_trips_through_entries() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let lin = Linear::new(&mut store, "fc", 3, 2, true, 0.02, &mut rng);
        assert_eq!(store.num_elements(), 8);
        let entries = store.to_entries();
        let mut other = store.clone();
        other.get_mut(lin.weight).data_mut()[0] = 99.0;
        other.load_entries(&entries).unwrap();
        assert_eq!(other.get(lin.weight), store.get(lin.weight));

        let mut bad = entries.clone();
        bad[0].0 = "nope".into();
        assert!(other.load_entries(&bad).is_err());
        assert!(other.load_entries(&entries[..1]).is_err());
    }

    #[test]
    fn linear_applies_weight_and_bias() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(&mut store, "fc", 2, 1, true, 1.0, &mut rng);
        store.set(lin.weight, Tensor::new(&[2, 1], vec![2.0, 3.0]).unwrap()).unwrap();
        store.set(lin.bias.unwrap(), Tensor::new(&[1], vec![0.5]).unwrap()).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let x = tape.constant(Tensor::new(&[2, 2], vec![1.0, 1.0, 0.0, -1.0]).unwrap());
        let y = lin.forward(&p, x).unwrap().to_tensor();
        assert_eq!(y.data(), &[5.5, -2.5]);
    }
}
