use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Named parameters in registration order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "StoreRepr<T>", into = "StoreRepr<T>")]
#[serde(bound(
    serialize = "T: Real + Serialize",
    deserialize = "T: Real + Deserialize<'de>"
))]
pub struct ParamStore<T: Real = f32> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound(
    serialize = "T: Real + Serialize",
    deserialize = "T: Real + Deserialize<'de>"
))]
struct StoreRepr<T: Real> {
    params: Vec<NamedTensor<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound(
    serialize = "T: Real + Serialize",
    deserialize = "T: Real + Deserialize<'de>"
))]
struct NamedTensor<T: Real> {
    name: String,
    #[serde(flatten)]
    tensor: Tensor<T>,
}

impl<T: Real> From<StoreRepr<T>> for ParamStore<T> {
    fn from(repr: StoreRepr<T>) -> Self {
        let mut store = ParamStore::new();
        for p in repr.params {
            store.insert(p.name, p.tensor);
        }
        store
    }
}

impl<T: Real> From<ParamStore<T>> for StoreRepr<T> {
    fn from(store: ParamStore<T>) -> Self {
        StoreRepr {
            params: store
                .entries
                .into_iter()
                .map(|(name, tensor)| NamedTensor { name, tensor })
                .collect(),
        }
    }
}

impl<T: Real> PartialEq for ParamStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Inserts or replaces a parameter.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.entries[i].1 = value;
            return i;
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.position(name)
            .map(|i| &self.entries[i].1)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let i = self
            .position(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        Ok(&mut self.entries[i].1)
    }

    pub fn at(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].1
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (n, t) in &self.entries {
            out.insert(n.clone(), t.cast());
        }
        out
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout<U: Real>(&self, other: &ParamStore<U>) -> bool {
        self.len() == other.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape())
    }

    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.entries
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect()
    }
}

/// Lazily binds parameters onto a tape. Each parameter is recorded at most
/// once, so gradients for shared uses accumulate on one node.
#[derive(Debug)]
pub struct Binder<'a, T: Real> {
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a, T: Real> Binder<'a, T> {
    /// `trainable = false` records parameters as constants (no gradients).
    pub fn new(store: &'a ParamStore<T>, trainable: bool) -> Self {
        Self {
            store,
            bound: vec![None; store.len()],
            trainable,
        }
    }

    /// A binder whose parameters are already on the tape as `vars`, in store
    /// order.
    pub fn prebound(store: &'a ParamStore<T>, vars: &[Var], trainable: bool) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(TensorError::InvalidArgument {
                op: "prebound",
                msg: format!("{} vars for {} parameters", vars.len(), store.len()),
            });
        }
        Ok(Self {
            store,
            bound: vars.iter().copied().map(Some).collect(),
            trainable,
        })
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn get(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        let i = self
            .store
            .position(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let v = tape.leaf(self.store.at(i).clone(), self.trainable);
        self.bound[i] = Some(v);
        Ok(v)
    }

    /// Gradients for every parameter in store order; unbound or unreached
    /// parameters get zeros.
    pub fn collect(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.bound
            .iter()
            .enumerate()
            .map(|(i, b)| match b {
                Some(v) => grads.get(*v),
                None => {
                    let t = self.store.at(i);
                    Tensor::zeros(t.rows(), t.cols())
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binder_records_each_param_once() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::from_rows(&[&[2.0]]));
        store.insert("unused", Tensor::from_rows(&[&[1.0]]));
        let mut tape = Tape::new();
        let mut b = Binder::new(&store, true);
        let w1 = b.get(&mut tape, "w").unwrap();
        let w2 = b.get(&mut tape, "w").unwrap();
        assert_eq!(w1, w2);
        let y = tape.mul(w1, w2).unwrap();
        let g = tape.backward(y).unwrap();
        let grads = b.collect(&g);
        assert_eq!(grads[0].item(), 4.0);
        assert_eq!(grads[1].item(), 0.0);
        assert!(b.get(&mut tape, "missing").is_err());
    }

    #[test]
    fn frozen_binder_yields_no_grad() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::from_rows(&[&[2.0]]));
        let mut tape = Tape::new();
        let mut b = Binder::new(&store, false);
        let w = b.get(&mut tape, "w").unwrap();
        assert!(!tape.requires_grad(w));
    }

    #[test]
    fn serde_round_trip_keeps_order_and_index() {
        let mut store = ParamStore::<f32>::new();
        store.insert("b", Tensor::zeros(1, 2));
        store.insert("a", Tensor::eye(2));
        let s = serde_json::to_string(&store).unwrap();
        let back: ParamStore<f32> = serde_json::from_str(&s).unwrap();
        assert_eq!(back.name(0), "b");
        assert_eq!(back.get("a").unwrap(), &Tensor::eye(2));
    }
}
