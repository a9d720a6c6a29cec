use std::collections::{BTreeMap, BTreeSet};

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// Named arrays owned by a model: trainable parameters plus non-trainable
/// buffers such as normalization running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    arrays: BTreeMap<String, Tensor>,
    buffers: BTreeSet<String>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        self.buffers.remove(&name);
        self.arrays.insert(name, value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        self.buffers.insert(name.clone());
        self.arrays.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.arrays
            .get_mut(name)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn is_buffer(&self, name: &str) -> bool {
        self.buffers.contains(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Number of trainable scalar values.
    pub fn trainable_count(&self) -> usize {
        self.arrays
            .iter()
            .filter(|(k, _)| !self.buffers.contains(*k))
            .map(|(_, v)| v.numel())
            .sum()
    }

    /// Replaces every array with the same-named entry of `arrays`. Names and
    /// shapes must match exactly.
    pub fn assign_from(&mut self, arrays: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, current) in &self.arrays {
            let new = arrays
                .get(name)
                .ok_or_else(|| AutodiffError::UnknownParam(name.clone()))?;
            new.expect_shape("assign_from", current.shape())?;
        }
        if let Some(extra) = arrays.keys().find(|k| !self.arrays.contains_key(*k)) {
            return Err(AutodiffError::UnknownParam(extra.clone()));
        }
        for (name, value) in arrays {
            self.arrays.insert(name.clone(), value.clone());
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        self.arrays.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffers_excluded_from_trainable_count() {
        let mut s = ParamStore::default();
        s.insert("w", Tensor::zeros(&[3, 3]));
        s.insert_buffer("bn.running_mean", Tensor::zeros(&[3]));
        assert_eq!(s.trainable_count(), 9);
        assert!(s.is_buffer("bn.running_mean"));
    }

    #[test]
    fn assign_requires_matching_layout() {
        let mut s = ParamStore::default();
        s.insert("w", Tensor::zeros(&[2]));
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::zeros(&[3]));
        assert!(s.assign_from(&m).is_err());
        m.insert("w".to_string(), Tensor::ones(&[2]));
        s.assign_from(&m).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[1.0, 1.0]);
    }
}
