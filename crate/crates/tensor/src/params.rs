use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a named parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named weight tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::Contract(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    /// Replace a value, keeping the shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(TensorError::Shape(format!("parameter {} has shape {:?}, got {:?}", self.names[id.0], self.tensors[id.0].shape(), value.shape())));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect(), index: self.index.clone() }
    }
}

/// Which parameters become gradient leaves. Everything else enters the
/// graph as a constant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSet {
    mask: Vec<bool>,
}

impl ParamSet {
    pub fn all<T: Scalar>(store: &ParamStore<T>) -> Self {
        Self { mask: vec![true; store.len()] }
    }

    pub fn none<T: Scalar>(store: &ParamStore<T>) -> Self {
        Self { mask: vec![false; store.len()] }
    }

    pub fn matching<T: Scalar>(store: &ParamStore<T>, pred: impl Fn(&str) -> bool) -> Self {
        Self { mask: store.names.iter().map(|n| pred(n)).collect() }
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.mask.get(id.0).copied().unwrap_or(false)
    }

    pub fn insert(&mut self, id: ParamId) {
        if id.0 >= self.mask.len() {
            self.mask.resize(id.0 + 1, false);
        }
        self.mask[id.0] = true;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One forward/backward pass over a parameter store.
///
/// Parameters are bound lazily: the first [`Session::param`] call for an id
/// creates a leaf (trainable) or a constant (frozen).
pub struct Session<'a, T> {
    graph: Graph<T>,
    store: &'a ParamStore<T>,
    trainable: &'a ParamSet,
    bound: Vec<Option<Var>>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: &'a ParamSet) -> Self {
        Self { graph: Graph::new(), store, trainable, bound: vec![None; store.len()] }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable.contains(id) { self.graph.leaf(t) } else { self.graph.constant(t) };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn backward(&self, loss: Var) -> Result<ParamGrads<T>> {
        let grads = self.graph.backward(loss)?;
        let mut out = ParamGrads::new(self.store.len());
        for (i, b) in self.bound.iter().enumerate() {
            if let Some(v) = b {
                if let Some(g) = grads.get(*v) {
                    out.grads[i] = Some(g.clone());
                }
            }
        }
        Ok(out)
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }
}

impl<T> Deref for Session<'_, T> {
    type Target = Graph<T>;
    fn deref(&self) -> &Graph<T> {
        &self.graph
    }
}

impl<T> DerefMut for Session<'_, T> {
    fn deref_mut(&mut self) -> &mut Graph<T> {
        &mut self.graph
    }
}

/// Per-parameter gradients; `None` for frozen or unreached parameters.
#[derive(Debug, Clone)]
pub struct ParamGrads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn new(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Number of parameters that received a gradient.
    pub fn materialized(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// `self += scale * other`
    pub fn accumulate(&mut self, other: &ParamGrads<T>, scale: f64) {
        let s = T::of(scale);
        for (i, g) in other.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            match &mut self.grads[i] {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += s * b;
                    }
                }
                slot => {
                    let mut t = g.clone();
                    t.data_mut().iter_mut().for_each(|v| *v *= s);
                    *slot = Some(t);
                }
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().flat_map(|g| g.data().iter()).map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
    }

    pub fn scale_all(&mut self, factor: f64) {
        let f = T::of(factor);
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= f);
        }
    }
}
