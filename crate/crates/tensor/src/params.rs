use std::collections::BTreeMap;

use crate::{Float, Graph, Gradients, Tensor, Var};

/// One named array in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    /// Buffers (e.g. running statistics) are stored but never optimized.
    pub trainable: bool,
}

/// Ordered name → array map holding a model's parameters and buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        self.entries.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.trainable)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_trainable_values(&self) -> usize {
        self.entries.values().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), Param { value: p.value.cast(), trainable: p.trainable }))
                .collect(),
        }
    }
}

/// Parameters of a store bound into one [`Graph`].
///
/// Leaves are created lazily on first use; trainable entries become
/// gradient-carrying leaves unless the binding is frozen.
pub struct Binding<'s, T: Float> {
    store: &'s ParamStore<T>,
    vars: BTreeMap<String, Var>,
    frozen: bool,
}

impl<'s, T: Float> Binding<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self { store, vars: BTreeMap::new(), frozen: false }
    }

    /// A binding whose leaves never receive gradients.
    pub fn frozen(store: &'s ParamStore<T>) -> Self {
        Self { store, vars: BTreeMap::new(), frozen: true }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Leaf for `name`; panics on unknown names since those are programming errors.
    pub fn var(&mut self, g: &mut Graph<T>, name: &str) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        let p = self
            .store
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let v = if p.trainable && !self.frozen {
            g.param(p.value.clone())
        } else {
            g.constant(p.value.clone())
        };
        self.vars.insert(name.to_string(), v);
        v
    }

    /// Gradients of every bound trainable parameter (zeros where unused).
    pub fn grads(&self, g: &Graph<T>, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter(|(name, _)| !self.frozen && self.store.is_trainable(name))
            .map(|(name, &v)| {
                let t = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.shape(v)));
                (name.clone(), t)
            })
            .collect()
    }
}
