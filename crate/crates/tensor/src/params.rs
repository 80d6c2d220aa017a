//! Named parameter storage shared by the model, optimizer, and checkpoints.

use crate::array::DenseArray;
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use rand::Rng;
use std::collections::BTreeMap;

/// Flat map from parameter name to tensor. Iteration order is the name
/// order, which keeps optimizer updates and serialization deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    entries: BTreeMap<String, DenseArray<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: DenseArray<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(TensorError::Contract(format!(
                "parameter {name:?} registered twice"
            )));
        }
        self.entries.insert(name.to_string(), value);
        Ok(())
    }

    /// Registers a tensor drawn uniformly from ±1/√fan_in.
    pub fn insert_fan_in(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let arr = DenseArray::uniform(shape, -bound, bound, rng);
        self.insert(name, arr)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, DenseArray::zeros(shape))
    }

    pub fn insert_full(&mut self, name: &str, shape: &[usize], value: T) -> Result<()> {
        self.insert(name, DenseArray::full(shape, value))
    }

    pub fn get(&self, name: &str) -> Result<&DenseArray<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| TensorError::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut DenseArray<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| TensorError::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseArray<T>)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DenseArray<T>)> {
        self.entries.iter_mut().map(|(n, a)| (n.as_str(), a))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    pub fn remove(&mut self, name: &str) -> Option<DenseArray<T>> {
        self.entries.remove(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_registration_is_rejected() {
        let mut p = ParamStore::<f32>::new();
        p.insert_zeros("w", &[2, 2]).unwrap();
        assert!(p.insert_zeros("w", &[2, 2]).is_err());
    }

    #[test]
    fn names_iterate_sorted() {
        let mut p = ParamStore::<f32>::new();
        p.insert_zeros("b", &[1]).unwrap();
        p.insert_zeros("a", &[1]).unwrap();
        p.insert_zeros("c", &[1]).unwrap();
        let names: Vec<_> = p.names().collect();
        assert_eq!(names, ["a", "b", "c"]);
    }

    #[test]
    fn fan_in_bound_is_respected() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamStore::<f64>::new();
        p.insert_fan_in("w", &[16, 16], 16, &mut rng).unwrap();
        let bound = 1.0 / 4.0;
        assert!(p.get("w").unwrap().data().iter().all(|v| v.abs() <= bound));
    }
}
