use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Tensor, Var};

/// Named parameter tensors in a fixed (lexicographic) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Model(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Model(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Moves every entry of `other` into `self`.
    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }
}

/// Lazily binds store entries to graph leaves, once per graph.
pub struct Binder<'s> {
    store: &'s ParamStore,
    trainable: bool,
    vars: BTreeMap<String, Var>,
}

impl<'s> Binder<'s> {
    /// Parameters bound as gradient-carrying leaves.
    pub fn trainable(store: &'s ParamStore) -> Self {
        Binder {
            store,
            trainable: true,
            vars: BTreeMap::new(),
        }
    }

    /// Parameters bound as constants.
    pub fn frozen(store: &'s ParamStore) -> Self {
        Binder {
            store,
            trainable: false,
            vars: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let v = if self.trainable {
            g.param(value)
        } else {
            g.constant(value)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound parameter, keyed by name.
    pub fn collect(&self, grads: &mut Gradients) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .filter_map(|(n, &v)| grads.take(v).map(|g| (n.clone(), g)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binds_once_per_graph() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(&[2], 3.0));
        let mut g = Graph::new();
        let mut b = Binder::trainable(&store);
        let v1 = b.var(&mut g, "w").unwrap();
        let v2 = b.var(&mut g, "w").unwrap();
        assert_eq!(v1, v2);
        let p = g.mul(v1, v2).unwrap();
        let l = g.sum(p).unwrap();
        let mut grads = g.backward(l).unwrap();
        let got = b.collect(&mut grads);
        assert_eq!(got["w"], vec![6.0, 6.0]);
        assert!(b.var(&mut g, "missing").is_err());
    }

    #[test]
    fn frozen_binding_has_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(&[2], 1.0));
        let mut g = Graph::new();
        let mut b = Binder::frozen(&store);
        let w = b.var(&mut g, "w").unwrap();
        assert!(!g.requires_grad(w));
    }
}
