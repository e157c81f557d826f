use indexmap::IndexMap;

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    /// Only 2-D weight matrices of linear layers are prunable.
    pub prunable: bool,
}

/// Ordered map from dotted parameter name to tensor. Insertion order is the
/// iteration order and is identical across runs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamTree<T> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Real> ParamTree<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, prunable: bool) -> Result<()> {
        let name = name.into();
        if prunable && tensor.shape().len() != 2 {
            return Err(Error::invalid(format!(
                "prunable parameter `{name}` must be a matrix, got shape {:?}",
                tensor.shape()
            )));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, Param { tensor, prunable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).map(|p| &p.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Prunable entries in tree order.
    pub fn named_prunable(&self) -> Vec<(&str, &Tensor<T>)> {
        self.entries
            .iter()
            .filter(|(_, p)| p.prunable)
            .map(|(k, p)| (k.as_str(), &p.tensor))
            .collect()
    }

    pub fn prunable_names(&self) -> Vec<String> {
        self.named_prunable()
            .into_iter()
            .map(|(n, _)| n.to_string())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn num_prunable(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.prunable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamTree<U> {
        ParamTree {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            prunable: p.prunable,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.tensor.all_finite())
    }
}
