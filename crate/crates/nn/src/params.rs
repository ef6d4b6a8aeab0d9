use std::collections::BTreeMap;

use crate::tensor::{mismatch, NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in registration order.
///
/// A store built with [`ParamStore::meta`] records names and shapes only,
/// so very large configurations can be instantiated for inspection
/// without allocating their values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
    meta: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn meta() -> Self {
        ParamStore {
            meta: true,
            ..Self::default()
        }
    }

    pub fn is_meta(&self) -> bool {
        self.meta
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let shape = tensor.shape().to_vec();
        self.add_with(name, shape, || tensor.into_data())
    }

    /// Registers a tensor whose values come from `init`, which is not
    /// called for a meta store.
    pub fn add_with(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        init: impl FnOnce() -> Vec<f64>,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "parameter {name} registered twice"
        );
        let id = ParamId(self.shapes.len());
        if !self.meta {
            let t = Tensor::new(shape.clone(), init()).expect("initializer length matches shape");
            self.tensors.push(t);
        }
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.shapes.push(shape);
        id
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.shapes.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.shapes
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    /// Replaces a tensor's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<(), NnError> {
        let slot = &mut self.tensors[id.0];
        if slot.shape() != tensor.shape() {
            return Err(mismatch("set", slot.shape(), tensor.shape()));
        }
        *slot = tensor;
        Ok(())
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub(crate) data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads {
            data: store
                .shapes
                .iter()
                .map(|s| vec![0.0; s.iter().product()])
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.iter().map(Vec::as_slice)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.data.iter_mut()
    }

    /// Global L2 norm over every buffer.
    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.data.iter_mut().flatten() {
            *g *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meta_store_counts_without_allocating() {
        let mut real = ParamStore::new();
        let mut meta = ParamStore::meta();
        for s in [&mut real, &mut meta] {
            s.add_with("w", vec![3, 4], || vec![1.0; 12]);
            s.add("b", Tensor::zeros(vec![4]));
        }
        assert_eq!(real.count(), 16);
        assert_eq!(meta.count(), 16);
        assert_eq!(meta.shape(meta.id("w").unwrap()), &[3, 4]);
        assert!(meta.iter().next().is_none());
    }

    #[test]
    #[should_panic(expected = "registered twice")]
    fn duplicate_names_panic() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(vec![1]));
        s.add("a", Tensor::zeros(vec![1]));
    }
}
