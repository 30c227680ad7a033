use std::collections::HashMap;

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(AutodiffError::DuplicateParameter(name));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces the value of an existing parameter; shapes must agree.
    pub fn set(&mut self, name: &str, t: Tensor<S>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))?;
        let cur = &self.tensors[id.0];
        if cur.shape() != t.shape() {
            return Err(crate::error::mismatch("param set", cur.shape(), t.shape()));
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Places every parameter on `graph`; those for which `trainable`
    /// returns true become gradient-receiving leaves, the rest constants.
    pub fn bind<'g>(&self, graph: &'g Graph<S>, trainable: impl Fn(&str) -> bool) -> Bound<'g, S> {
        let mut vars = Vec::with_capacity(self.len());
        let mut train = Vec::with_capacity(self.len());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            let tr = trainable(name);
            vars.push(if tr {
                graph.param(t)
            } else {
                graph.constant(t)
            });
            train.push(tr);
        }
        Bound {
            graph,
            vars,
            trainable: train,
        }
    }

    pub fn bind_all<'g>(&self, graph: &'g Graph<S>) -> Bound<'g, S> {
        self.bind(graph, |_| true)
    }

    pub fn bind_frozen<'g>(&self, graph: &'g Graph<S>) -> Bound<'g, S> {
        self.bind(graph, |_| false)
    }
}

/// A [`ParamStore`] placed on a graph for one step.
pub struct Bound<'g, S: Scalar = f32> {
    graph: &'g Graph<S>,
    vars: Vec<Var<'g, S>>,
    trainable: Vec<bool>,
}

impl<'g, S: Scalar> Bound<'g, S> {
    pub fn var(&self, id: ParamId) -> Var<'g, S> {
        self.vars[id.0]
    }

    pub fn graph(&self) -> &'g Graph<S> {
        self.graph
    }

    /// Gradients for the trainable parameters that were reached by the
    /// last backward pass. Unreached trainable parameters are omitted.
    pub fn grads(&self) -> Gradients<S> {
        let mut grads = Gradients::default();
        for (i, (v, &tr)) in self.vars.iter().zip(&self.trainable).enumerate() {
            if !tr {
                continue;
            }
            if let Some(g) = self.graph.grad(*v) {
                grads.insert(ParamId(i), g.into_data());
            }
        }
        grads
    }
}

/// Sparse map from parameter to gradient buffer.
#[derive(Debug, Clone, Default)]
pub struct Gradients<S: Scalar = f32> {
    entries: HashMap<ParamId, Vec<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn insert(&mut self, id: ParamId, g: Vec<S>) {
        self.entries.insert(id, g);
    }

    pub fn get(&self, id: ParamId) -> Option<&[S]> {
        self.entries.get(&id).map(Vec::as_slice)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Adds `other` into `self`, summing overlapping entries.
    pub fn merge(&mut self, other: Gradients<S>) {
        for (id, g) in other.entries {
            match self.entries.get_mut(&id) {
                Some(cur) => cur.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => {
                    self.entries.insert(id, g);
                }
            }
        }
    }

    /// Ids whose gradient has at least one nonzero entry.
    pub fn nonzero_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .entries
            .iter()
            .filter(|(_, g)| g.iter().any(|v| *v != S::zero()))
            .map(|(id, _)| *id)
            .collect();
        ids.sort();
        ids
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: S) {
        self.entries
            .values_mut()
            .for_each(|g| g.iter_mut().for_each(|v| *v *= s));
    }
}
