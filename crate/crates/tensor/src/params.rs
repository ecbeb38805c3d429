use std::collections::HashMap;

use crate::{Grads, Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable tensors.
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

    /// Registers a parameter. Panics on duplicate names.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        let mut out = Self::new();
        for (name, t) in self.iter() {
            out.insert(name, Tensor::zeros(t.shape()));
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, t) in self.iter() {
            out.insert(name, t.cast());
        }
        out
    }
}

/// A graph plus lazily bound parameters.
///
/// Each parameter becomes a graph leaf the first time a layer uses it, so
/// parameters that a forward pass never touches get no node.
#[derive(Debug)]
pub struct Session<'p, T> {
    pub graph: Graph<T>,
    params: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
}

impl<'p, T: Scalar> Session<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { graph: Graph::new(), params, bound: vec![None; params.len()] }
    }

    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self { graph: Graph::inference(), params, bound: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.params.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn conv(&mut self, x: Var, w: ParamId, b: Option<ParamId>, stride: usize, pad: usize) -> Var {
        let w = self.p(w);
        let b = b.map(|b| self.p(b));
        self.graph.conv2d(x, w, b, stride, pad)
    }

    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
        let w = self.p(w);
        let b = b.map(|b| self.p(b));
        self.graph.linear(x, w, b)
    }

    /// Backward from `root`, returning one gradient per parameter (zeros for unused ones).
    pub fn param_grads(&self, root: Var) -> Vec<Tensor<T>> {
        let mut grads = self.graph.backward(root);
        self.collect(&mut grads)
    }

    pub fn collect(&self, grads: &mut Grads<T>) -> Vec<Tensor<T>> {
        self.params
            .ids()
            .map(|id| {
                self.bound[id.0]
                    .and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(self.params.get(id).shape()))
            })
            .collect()
    }
}
