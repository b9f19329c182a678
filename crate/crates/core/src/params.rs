//! Named parameter and gradient storage.

use std::collections::BTreeMap;

use crate::rng::{Purpose, Stream};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// One named tensor in a [`ParamStore`]. Batch-norm running statistics are
/// stored alongside the trainable tensors with `trainable = false`.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named map from layer identifier to weight/bias tensors plus buffers.
/// Iteration order is the sorted name order, which keeps every consumer
/// (Adam, checkpointing, gradient packing) deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) {
        let prev = self.entries.insert(name.to_string(), Param { value, trainable });
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    /// New trainable tensor drawn from N(0, 0.01), i.e. std 0.1.
    pub fn init_gaussian(&mut self, name: &str, shape: &[usize], seed: u64, component: &str) {
        let mut t = Tensor::zeros(shape);
        let mut s = Stream::named(seed, Purpose::ParamInit, &format!("{component}.{name}"));
        for v in &mut t.data {
            *v = 0.1 * s.normal();
        }
        self.insert(name, t, true);
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) {
        self.insert(name, Tensor::full(shape, value), trainable);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries.values().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Pack all trainable entries into one flat vector (sorted-name order).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, p) in self.entries.iter().filter(|(_, p)| p.trainable) {
            out.extend_from_slice(&p.value.data);
        }
        out
    }

    /// Inverse of [`to_flat`]; errors when the length disagrees.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_trainable_scalars() {
            return Err(Error::Config(format!(
                "flat vector has {} scalars, store expects {}",
                flat.len(),
                self.num_trainable_scalars()
            )));
        }
        let mut offset = 0;
        for (_, p) in self.entries.iter_mut().filter(|(_, p)| p.trainable) {
            let n = p.value.len();
            p.value.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.value.all_finite())
    }
}

/// Gradients shaped like the trainable subset of a [`ParamStore`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradStore {
    entries: BTreeMap<String, Tensor>,
}

impl GradStore {
    pub fn zeros_like(params: &ParamStore) -> Self {
        let mut entries = BTreeMap::new();
        for (name, p) in params.iter() {
            if p.trainable {
                entries.insert(name.clone(), Tensor::zeros(&p.value.shape));
            }
        }
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn accumulate(&mut self, name: &str, grad: &Tensor, scale: f64) {
        let slot = self.entries.get_mut(name).unwrap_or_else(|| panic!("no gradient slot {name}"));
        slot.add_scaled(grad, scale);
    }

    /// self += scale * other for every slot.
    pub fn add_scaled(&mut self, other: &GradStore, scale: f64) {
        for (name, g) in &other.entries {
            self.accumulate(name, g, scale);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.entries.values_mut() {
            g.scale(s);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries.values().map(|g| g.squared_norm()).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|g| g.all_finite())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in self.entries.values() {
            out.extend_from_slice(&g.data);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_round_trip() {
        let mut ps = ParamStore::new();
        ps.init_gaussian("b.w", &[2, 3], 1, "t");
        ps.init_const("a.buf", &[2], 5.0, false);
        ps.init_gaussian("a.w", &[4], 1, "t");
        let flat = ps.to_flat();
        assert_eq!(flat.len(), 10); // buffers excluded
        let mut ps2 = ps.clone();
        ps2.load_flat(&vec![0.0; 10]).unwrap();
        assert!(ps2.to_flat().iter().all(|&v| v == 0.0));
        assert_eq!(ps2.get("a.buf").unwrap().data, vec![5.0, 5.0]);
        ps2.load_flat(&flat).unwrap();
        assert_eq!(ps2, ps);
    }

    #[test]
    fn init_is_deterministic_per_name() {
        let mut a = ParamStore::new();
        a.init_gaussian("w", &[16], 9, "net");
        let mut b = ParamStore::new();
        b.init_gaussian("w", &[16], 9, "net");
        assert_eq!(a, b);
        let mut c = ParamStore::new();
        c.init_gaussian("w", &[16], 9, "other");
        assert_ne!(a, c);
    }

    #[test]
    fn grad_store_tracks_trainable_only() {
        let mut ps = ParamStore::new();
        ps.init_gaussian("w", &[3], 0, "t");
        ps.init_const("rm", &[3], 0.0, false);
        let gs = GradStore::zeros_like(&ps);
        assert!(gs.get("w").is_some());
        assert!(gs.get("rm").is_none());
    }
}
