use indexmap::IndexMap;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Named parameters in insertion order. Names are hierarchical
/// (`visual.layers.0.attn.q.weight`) so selectors can match on prefixes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor<T>>,
}

/// Gradients keyed by parameter name; parameters that did not influence the
/// loss are absent.
pub type GradMap<T> = IndexMap<String, Vec<T>>;

/// Parameters recorded as leaves on one tape.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.params.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.params.shift_remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Records every parameter as a gradient-requiring leaf.
    pub fn bind(&self, tape: &Tape<T>) -> BoundParams {
        self.bind_with(tape, true)
    }

    /// Records every parameter as a constant leaf.
    pub fn bind_constant(&self, tape: &Tape<T>) -> BoundParams {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &Tape<T>, requires_grad: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let leaf = t.clone().with_requires_grad(requires_grad);
                (name.clone(), tape.leaf(leaf))
            })
            .collect();
        BoundParams { vars }
    }

    /// Extracts the gradients of bound parameters, dropping untouched ones.
    pub fn collect_grads(&self, grads: &mut Gradients<T>, bound: &BoundParams) -> GradMap<T> {
        bound
            .iter()
            .filter_map(|(name, v)| grads.take(v).map(|g| (name.to_string(), g)))
            .collect()
    }

    /// Writes gradient buffers into the tensors' grad slots; absent entries become zeros.
    pub fn attach_grads(&mut self, grads: &GradMap<T>) {
        for (name, t) in self.params.iter_mut() {
            let g = grads.get(name).cloned().unwrap_or_else(|| vec![T::zero(); t.numel()]);
            t.set_grad(g).expect("gradient length matches parameter");
        }
    }
}
