use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{invalid, Result};

/// Role of a parameter, used to decide which regularizers apply to it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Non-recurrent weight matrix (input projections, attention, skip
    /// connections, readout, embeddings).
    Weight,
    /// Hidden-to-hidden matrix of a recurrent cell.
    Recurrent,
    Bias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub kind: ParamKind,
    pub trainable: bool,
}

/// Named parameters, kept sorted by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) {
        self.entries.insert(
            name.into(),
            Param {
                value,
                kind,
                trainable: true,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| invalid(format!("unknown parameter `{name}`")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| invalid(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| invalid(format!("unknown parameter `{name}`")))
    }

    pub fn freeze_all(&mut self) {
        self.entries.values_mut().for_each(|p| p.trainable = false);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(|p| p.value.is_finite())
    }
}

/// Gradients keyed by trainable parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientSet {
    entries: BTreeMap<String, Tensor>,
}

impl GradientSet {
    /// All-zero gradients for every trainable parameter of `params`.
    pub fn zeros_like(params: &ParamStore) -> Self {
        let entries = params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(name, p)| (name.to_string(), Tensor::zeros(p.value.shape())))
            .collect();
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.entries.insert(name, grad);
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
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

    /// `self += scale * other`, key sets must agree.
    pub fn add_scaled(&mut self, other: &GradientSet, scale: f64) {
        for (name, g) in self.entries.iter_mut() {
            let o = other
                .entries
                .get(name)
                .unwrap_or_else(|| panic!("gradient `{name}` missing from addend"));
            for (a, b) in g.data_mut().iter_mut().zip(o.data()) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.entries.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .map(Tensor::sum_squares)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }
}
