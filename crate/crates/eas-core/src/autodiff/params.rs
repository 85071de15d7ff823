use std::collections::BTreeMap;

use super::tensor::Tensor;
use super::TapeError;

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named collection of tensors with per-entry trainable flags. Iteration
/// order is the name order, which keeps checkpoints and optimizer sweeps
/// deterministic.
#[derive(Clone, Debug, Default)]
pub struct NamedParamSet {
    entries: BTreeMap<String, ParamEntry>,
}

impl NamedParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<(), TapeError> {
        if self.entries.contains_key(name) {
            return Err(TapeError::DuplicateLeaf { name: name.to_string() });
        }
        self.entries.insert(name.to_string(), ParamEntry { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).map(|e| e.trainable).unwrap_or(false)
    }

    /// Replace an entry's values; the shape must not change.
    pub fn set_values(&mut self, name: &str, tensor: Tensor) -> Result<(), TapeError> {
        let entry = self.entries.get_mut(name).ok_or_else(|| TapeError::UnknownTarget {
            name: name.to_string(),
        })?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(TapeError::ShapeMismatch {
                op: "set-values",
                detail: format!(
                    "{}: stored {:?}, new {:?}",
                    name,
                    entry.tensor.shape(),
                    tensor.shape()
                ),
            });
        }
        entry.tensor = tensor;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.as_str(), &e.tensor))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_name_rejected() {
        let mut p = NamedParamSet::new();
        p.insert("a", Tensor::scalar(1.0), true).unwrap();
        assert!(p.insert("a", Tensor::scalar(2.0), true).is_err());
    }

    #[test]
    fn shape_stability_enforced() {
        let mut p = NamedParamSet::new();
        p.insert("a", Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        assert!(p.set_values("a", Tensor::vector(vec![1.0])).is_err());
        p.set_values("a", Tensor::vector(vec![3.0, 4.0])).unwrap();
        assert_eq!(p.get("a").unwrap().data(), &[3.0, 4.0]);
    }
}
