//! Named parameter storage with trainable/frozen flags.
//!
//! Model structs hold `ParamId` handles into a `ParamStore`; forward passes
//! borrow the store immutably (so batch items can run in parallel) and only
//! the optimizer takes it mutably.

use super::tensor::{Real, Tensor};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

struct Entry<F> {
    name: String,
    value: Tensor<F>,
    trainable: bool,
}

/// Named map of parameter tensors plus a frozen predicate per tensor.
pub struct ParamStore<F> {
    entries: Vec<Entry<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry { name, value, trainable: true });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Marks every parameter whose name matches the predicate as frozen and
    /// the rest as trainable.
    pub fn set_frozen(&mut self, frozen: impl Fn(&str) -> bool) {
        for e in &mut self.entries {
            e.trainable = !frozen(&e.name);
        }
    }

    /// Restricts the trainable set to names matching the predicate; frozen
    /// names stay frozen regardless.
    pub fn set_trainable_within(&mut self, frozen: impl Fn(&str) -> bool, trainable: impl Fn(&str) -> bool) {
        for e in &mut self.entries {
            e.trainable = !frozen(&e.name) && trainable(&e.name);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn num_scalars_matching(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.entries.iter().filter(|e| pred(&e.name)).map(|e| e.value.numel()).sum()
    }

    /// FNV-1a over the little-endian bytes of a tensor; used to assert that
    /// frozen tensors stay bit-identical across training.
    pub fn checksum(&self, id: ParamId) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in &self.entries[id.0].value.data {
            for b in v.as_f64().to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    pub fn checksums_matching(&self, pred: impl Fn(&str) -> bool) -> Vec<(String, u64)> {
        self.ids()
            .filter(|&id| pred(self.name(id)))
            .map(|id| (self.name(id).to_string(), self.checksum(id)))
            .collect()
    }
}

/// Per-parameter gradients produced by one or more backward passes.
pub struct Gradients<F> {
    by_param: HashMap<usize, Tensor<F>>,
}

impl<F: Real> Default for Gradients<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Gradients<F> {
    pub fn new() -> Self {
        Self { by_param: HashMap::new() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.by_param.get(&id.0)
    }

    pub fn accumulate(&mut self, id: ParamId, grad: Tensor<F>) {
        match self.by_param.get_mut(&id.0) {
            Some(g) => {
                debug_assert_eq!(g.shape, grad.shape);
                for (a, b) in g.data.iter_mut().zip(&grad.data) {
                    *a = *a + *b;
                }
            }
            None => {
                self.by_param.insert(id.0, grad);
            }
        }
    }

    /// Adds every gradient of `other` into `self`.
    pub fn merge(&mut self, other: Gradients<F>) {
        for (k, g) in other.by_param {
            self.accumulate(ParamId(k), g);
        }
    }

    pub fn scale(&mut self, c: F) {
        for g in self.by_param.values_mut() {
            for v in &mut g.data {
                *v = *v * c;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.by_param.iter().map(|(&k, g)| (ParamId(k), g))
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Global L2 norm across every stored gradient.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for g in self.by_param.values() {
            for v in &g.data {
                let x = v.as_f64();
                acc += x * x;
            }
        }
        acc.sqrt()
    }

    /// Clips to `max_norm` (global), returning the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(F::fl(max_norm / norm));
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freeze_predicate_marks_entries() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let a = store.add("text.w", Tensor::zeros(vec![2]));
        let b = store.add("motion.w", Tensor::zeros(vec![2]));
        store.set_frozen(|n| n.starts_with("text."));
        assert!(!store.trainable(a));
        assert!(store.trainable(b));
    }

    #[test]
    fn checksum_detects_single_bit_change() {
        let mut store: ParamStore<f32> = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]));
        let before = store.checksum(id);
        store.value_mut(id).data[1] = 2.0000002;
        assert_ne!(before, store.checksum(id));
    }
}
