//! Ordered map from canonical parameter names to tensors.
//!
//! Houses every model state handled by the toolkit: dense weights, MoE
//! weights, and the intermediate stores merges operate on. Iteration order
//! is insertion order, which all persistence and hashing relies on.

use std::collections::BTreeSet;

use indexmap::IndexMap;

use crate::tensor::{arg_err, Real, Result, Tensor};

#[derive(Clone, Default)]
pub struct ParamStore<S: Real = f32> {
    map: IndexMap<String, Tensor<S>>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { map: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(arg_err("ParamStore::insert", format!("duplicate parameter name {name}")));
        }
        self.map.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.map.get_mut(name)
    }

    pub fn set(&mut self, name: &str, tensor: Tensor<S>) -> Result<()> {
        match self.map.get_mut(name) {
            Some(slot) => {
                *slot = tensor;
                Ok(())
            }
            None => Err(arg_err("ParamStore::set", format!("unknown parameter name {name}"))),
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|k| k.as_str())
    }

    pub fn name_set(&self) -> BTreeSet<String> {
        self.map.keys().cloned().collect()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn to_f64(&self) -> ParamStore<f64> {
        ParamStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.to_f64())).collect(),
        }
    }

    pub fn to_f32(&self) -> ParamStore<f32> {
        ParamStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.to_f32())).collect(),
        }
    }

    pub fn bit_eq(&self, other: &ParamStore<S>) -> bool {
        self.map.len() == other.map.len()
            && self
                .map
                .iter()
                .all(|(k, v)| other.get(k).map(|o| v.bit_eq(o)).unwrap_or(false))
    }
}

impl<S: Real> FromIterator<(String, Tensor<S>)> for ParamStore<S> {
    fn from_iter<T: IntoIterator<Item = (String, Tensor<S>)>>(iter: T) -> Self {
        ParamStore { map: iter.into_iter().collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_rejects_duplicates() {
        let mut store = ParamStore::<f32>::new();
        store.insert("a", Tensor::zeros(&[2])).unwrap();
        assert!(store.insert("a", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn iteration_preserves_insertion_order() {
        let mut store = ParamStore::<f32>::new();
        for name in ["z", "a", "m"] {
            store.insert(name, Tensor::zeros(&[1])).unwrap();
        }
        let names: Vec<&str> = store.names().collect();
        assert_eq!(names, vec!["z", "a", "m"]);
    }
}
