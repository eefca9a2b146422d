//! Named parameter storage decoupled from the per-step tape.
//!
//! Models register tensors once in a `ParamStore` (declaration order is the
//! checkpoint order) and bind them onto a fresh `Graph` every forward pass
//! through `Bindings`, which dedupes so each parameter appears on the tape
//! exactly once per step.

use crate::error::{ExnError, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(ExnError::invalid(format!("duplicate parameter name {name}")));
        }
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
        });
        self.index.insert(name.to_string(), self.entries.len() - 1);
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Declaration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|id| self.is_trainable(*id)).collect()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Element-wise precision conversion preserving names and order.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            let data: Vec<U> = e.value.data().iter().map(|v| U::of_f64(v.as_f64())).collect();
            let t = Tensor::new(e.value.shape().to_vec(), data).expect("same shape");
            out.add(&e.name, t, e.trainable).expect("unique names preserved");
        }
        out
    }
}

/// Per-forward map from stored parameters to tape leaves.
#[derive(Debug, Default)]
pub struct Bindings {
    map: HashMap<ParamId, Var>,
    order: Vec<(ParamId, Var)>,
}

impl Bindings {
    pub fn new() -> Self {
        Bindings {
            map: HashMap::new(),
            order: Vec::new(),
        }
    }

    /// Returns the tape leaf for `id`, creating it on first use. Trainable
    /// entries become gradient-carrying named leaves, frozen entries become
    /// plain inputs.
    pub fn bind<T: Scalar>(
        &mut self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        id: ParamId,
    ) -> Var {
        if let Some(v) = self.map.get(&id) {
            return *v;
        }
        let v = if store.is_trainable(id) {
            g.param(store.name(id), store.value(id).clone())
        } else {
            g.input(store.value(id).clone())
        };
        self.map.insert(id, v);
        self.order.push((id, v));
        v
    }

    /// Bindings in first-use order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.order.iter().copied()
    }

    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.map.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Whether a forward pass uses batch statistics and updates running stats
/// (train) or frozen running statistics for batch members (eval).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Uniform init on [−bound, bound]. Samples are drawn in f64 so an f32 and
/// an f64 store built from the same seed hold the same values up to rounding.
pub fn uniform_init<T: Scalar>(
    shape: &[usize],
    bound: f64,
    rng: &mut impl rand::Rng,
) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::of_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}
