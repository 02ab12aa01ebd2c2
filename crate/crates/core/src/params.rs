//! Named parameter storage and per-pass binding onto a tape.

use std::collections::{BTreeMap, HashMap};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
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

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// Overwrites values from `other` by name; shapes must match.
    pub fn copy_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in other.names.iter().zip(&other.tensors) {
            if let Some(id) = self.find(name) {
                if self.tensors[id.0].shape() != t.shape() {
                    return Err(Error::mismatch("copy_matching", self.tensors[id.0].shape(), t.shape()));
                }
                self.tensors[id.0] = t.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}

/// Scope tag used to untie shared parameters per branch.
pub type Scope = usize;

/// A tape plus lazily-bound parameter leaves.
///
/// By default every use of a parameter maps to one leaf. With
/// [`Graph::untied`], uses inside a [`Graph::set_scope`] region bind a
/// separate leaf per scope, so each branch's contribution to a shared
/// parameter's gradient can be read on its own.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: BTreeMap<(ParamId, Option<Scope>), Var>,
    untie: bool,
    scope: Option<Scope>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
            untie: false,
            scope: None,
        }
    }

    pub fn untied(store: &'a ParamStore) -> Self {
        Graph {
            untie: true,
            ..Graph::new(store)
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn set_scope(&mut self, scope: Option<Scope>) {
        self.scope = scope;
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let key = (id, if self.untie { self.scope } else { None });
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone());
        self.bound.insert(key, v);
        v
    }

    /// One gradient per stored parameter, summed across scopes. Parameters
    /// never touched in this pass get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = self
            .store
            .tensors
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        for (&(id, _), &v) in &self.bound {
            let g = grads.wrt(v);
            out[id.0]
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b);
        }
        out
    }

    /// Per-scope gradient pieces of one parameter, ordered by scope
    /// (unscoped first).
    pub fn scoped_grads(&self, grads: &Gradients, id: ParamId) -> BTreeMap<Option<Scope>, Tensor> {
        self.bound
            .iter()
            .filter(|((pid, _), _)| *pid == id)
            .map(|(&(_, scope), &v)| (scope, grads.wrt(v)))
            .collect()
    }
}
