use std::collections::HashMap;
use std::sync::Arc;

use super::{Real, Tensor};
use crate::{Error, Result};

/// Index of a [`Parameter`] inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<R: Real> {
    pub name: String,
    value: Arc<Tensor<R>>,
    pub grad: Tensor<R>,
}

impl<R: Real> Parameter<R> {
    pub fn value(&self) -> &Tensor<R> {
        &self.value
    }

    pub(crate) fn shared_value(&self) -> Arc<Tensor<R>> {
        Arc::clone(&self.value)
    }

    /// Mutable access for optimizer updates; copies the tensor only if a live
    /// graph still holds it.
    pub fn value_mut(&mut self) -> &mut Tensor<R> {
        Arc::make_mut(&mut self.value)
    }
}

/// Named collection of parameters owned by one model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<R: Real> {
    params: Vec<Parameter<R>>,
    by_name: HashMap<String, ParamId>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    /// Register a new parameter. Names are unique within a store.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<R>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract("ParamStore::add", format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value: Arc::new(value), grad });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<R> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<R> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<R>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<R>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = R::zero());
        }
    }

    /// Add `grads` into each parameter's accumulated gradient.
    pub fn accumulate(&mut self, grads: &Gradients<R>) {
        for (id, g) in grads.iter() {
            self.params[id.0].grad.add_assign(g);
        }
    }

    /// Replace a parameter's value, keeping its shape contract.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<R>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::contract(
                "ParamStore::set_value",
                format!("`{}` has shape {:?}, got {:?}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    /// Precision conversion of all values (gradients reset to zero).
    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.cast()).expect("names already unique");
        }
        out
    }
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients<R: Real> {
    pub(crate) map: HashMap<ParamId, Tensor<R>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<R>> {
        self.map.get(&id)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor<R>> {
        self.map.get_mut(&id)
    }

    /// Iterate in parameter order so traversal is deterministic.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<R>)> {
        let mut ids: Vec<_> = self.map.keys().copied().collect();
        ids.sort();
        ids.into_iter().map(move |id| (id, &self.map[&id]))
    }

    pub fn scale(&mut self, s: R) {
        for g in self.map.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}
