//! Named parameter storage and per-graph binding.
//!
//! All model state lives in a [`ParamStore`], a sorted map from dotted names
//! (`base.blocks.3.img.qkv.w`, `infusenet.heads.1.2.b`, `proj.mlp1.w`) to
//! tensors. Sorting gives the checkpoint its canonical order. A forward pass
//! binds the tensors it touches onto a [`Graph`] through a [`Binder`], which
//! decides per name whether the leaf is trainable.

use std::collections::{BTreeMap, HashMap};

use infu_tensor::{Graph, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| invalid(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| invalid(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Tensors whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn merge(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    /// Names of tensors that differ bitwise between `self` and `other`,
    /// including names present in only one of them.
    pub fn changed_names(&self, other: &ParamStore) -> Vec<String> {
        let mut out: Vec<String> = self
            .tensors
            .iter()
            .filter(|(k, v)| other.tensors.get(*k).map_or(true, |o| !o.bit_eq(v)))
            .map(|(k, _)| k.clone())
            .collect();
        out.extend(
            other
                .tensors
                .keys()
                .filter(|k| !self.tensors.contains_key(*k))
                .cloned(),
        );
        out.sort();
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Rounds every value to the nearest `f32` so the store survives the
    /// 32-bit checkpoint format bit-exactly.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            round_to_f32(t.data_mut());
        }
    }
}

pub fn round_to_f32(data: &mut [f64]) {
    for v in data {
        *v = *v as f32 as f64;
    }
}

/// Seeded parameter initializer writing into a store.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64) {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        self.store.insert(name, t);
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) {
        self.store.insert(name, Tensor::full(shape.to_vec(), value));
    }

    /// `prefix.w [fan_in × fan_out]` with std `gain/√fan_in`, and zero `prefix.b`.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, gain: f64) {
        let std = gain / (fan_in as f64).sqrt();
        if std == 0.0 {
            self.constant(format!("{prefix}.w"), &[fan_in, fan_out], 0.0);
        } else {
            self.normal(format!("{prefix}.w"), &[fan_in, fan_out], std);
        }
        self.constant(format!("{prefix}.b"), &[fan_out], 0.0);
    }
}

/// Binds store tensors onto a graph, once per name.
pub struct Binder<'s> {
    store: &'s ParamStore,
    trainable: bool,
    bound: Vec<(String, Var)>,
    lookup: HashMap<String, Var>,
}

impl<'s> Binder<'s> {
    /// Every tensor bound through this binder is a trainable leaf iff `trainable`.
    pub fn new(store: &'s ParamStore, trainable: bool) -> Self {
        Self {
            store,
            trainable,
            bound: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    /// A binder whose listed names resolve to existing graph leaves, e.g.
    /// leaves created by a gradient checker.
    pub fn with_bound(
        store: &'s ParamStore,
        trainable: bool,
        bound: impl IntoIterator<Item = (String, Var)>,
    ) -> Self {
        let mut b = Self::new(store, trainable);
        for (name, v) in bound {
            b.lookup.insert(name.clone(), v);
            b.bound.push((name, v));
        }
        b
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.lookup.get(name) {
            return Ok(v);
        }
        let v = g.leaf(self.store.get(name)?.clone(), self.trainable);
        self.lookup.insert(name.to_owned(), v);
        self.bound.push((name.to_owned(), v));
        Ok(v)
    }

    pub fn bound(&self) -> &[(String, Var)] {
        &self.bound
    }

    /// Gradients of every bound trainable tensor; tensors the backward pass
    /// never reached get zeros.
    pub fn gradients(&self, g: &Graph) -> BTreeMap<String, Tensor> {
        if !self.trainable {
            return BTreeMap::new();
        }
        self.bound
            .iter()
            .map(|(name, v)| {
                let grad = g
                    .grad(*v)
                    .unwrap_or_else(|| Tensor::zeros(g.value(*v).shape().to_vec()));
                (name.clone(), grad)
            })
            .collect()
    }
}
