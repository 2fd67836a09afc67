//! Named parameter storage with deterministic (lexicographic) iteration.

use std::collections::BTreeMap;

use crate::tape::{Gradients, Tape, TapeError, VarId};
use crate::tensor::{Scalar, Tensor};

/// Named parameter tensors. Iteration order is the lexicographic order of
/// the names, which keeps binding, gradient reduction and checkpoint layout
/// deterministic.
#[derive(Clone, Default)]
pub struct ParamStore<T: Scalar> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Map from parameter name to its var on a particular tape.
pub struct ParamBinding {
    ids: BTreeMap<String, VarId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        let prev = self.tensors.insert(name.clone(), tensor);
        assert!(prev.is_none(), "duplicate parameter name {name:?}");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn total_len(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Insert every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> ParamBinding {
        let mut ids = BTreeMap::new();
        for (name, tensor) in &self.tensors {
            ids.insert(name.clone(), tape.var(tensor.clone()));
        }
        ParamBinding { ids }
    }

    /// Convert elementwise, e.g. between the `f32` training store and the
    /// `f64` store used in gradient-check fixtures.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, tensor) in &self.tensors {
            out.insert(
                name.clone(),
                Tensor::from_f64_slice(tensor.shape().to_vec(), &tensor.to_f64_vec()),
            );
        }
        out
    }
}

impl ParamBinding {
    /// Binding over externally created vars, used when the caller manages
    /// the leaves itself (gradient-check fixtures do).
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, VarId)>) -> Self {
        ParamBinding {
            ids: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> VarId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name:?}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &VarId)> {
        self.ids.iter()
    }
}

/// Gradient of a scalar loss with respect to every parameter in the store.
/// Parameters the loss never touched get explicit zero tensors.
pub fn grad<T: Scalar>(
    tape: &Tape<T>,
    loss: VarId,
    binding: &ParamBinding,
    store: &ParamStore<T>,
) -> Result<BTreeMap<String, Tensor<T>>, TapeError> {
    let grads = tape.backward(loss)?;
    Ok(collect_named(&grads, binding, store))
}

/// Extract named parameter gradients from an already-computed backward pass.
pub fn collect_named<T: Scalar>(
    grads: &Gradients<T>,
    binding: &ParamBinding,
    store: &ParamStore<T>,
) -> BTreeMap<String, Tensor<T>> {
    let mut out = BTreeMap::new();
    for (name, id) in binding.iter() {
        let shape = store.get(name).expect("binding refers to unknown parameter");
        out.insert(name.clone(), grads.get_or_zeros(*id, shape.shape()));
    }
    out
}
