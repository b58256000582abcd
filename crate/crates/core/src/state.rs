//! Named parameter collections.
//!
//! Every network in the crate keeps its learnable parameters and its
//! normalization running statistics in a [`ModelState`], keyed by a dotted
//! path such as `encoder.block2.conv.weight`. Gradients use the same type and
//! naming, which lets the optimizer, the moving-average teacher and the
//! checkpoint writer treat all networks uniformly.

use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayViewD, Dimension};

use crate::error::{Error, Result};

/// Suffixes that mark non-learnable buffers (normalization running statistics).
const BUFFER_SUFFIXES: [&str; 2] = [".running_mean", ".running_var"];

pub fn is_buffer(name: &str) -> bool {
    BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s))
}

/// Ordered map from parameter name to array.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelState {
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl ModelState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<D: Dimension>(&mut self, name: impl Into<String>, value: ndarray::Array<f64, D>) {
        self.tensors.insert(name.into(), value.into_dyn());
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::State(format!("missing tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("missing tensor `{name}`")))
    }

    /// Typed read-only view of a tensor.
    pub fn view<D: Dimension>(&self, name: &str) -> Result<ndarray::ArrayView<'_, f64, D>> {
        self.get(name)?
            .view()
            .into_dimensionality::<D>()
            .map_err(|e| Error::State(format!("tensor `{name}` has unexpected rank: {e}")))
    }

    pub fn view_mut<D: Dimension>(
        &mut self,
        name: &str,
    ) -> Result<ndarray::ArrayViewMut<'_, f64, D>> {
        self.get_mut(name)?
            .view_mut()
            .into_dimensionality::<D>()
            .map_err(|e| Error::State(format!("tensor `{name}` has unexpected rank: {e}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<ArrayD<f64>> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(ArrayD::len).sum()
    }

    /// Entries whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ModelState {
        ModelState {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copy every tensor of `other` into `self`, replacing existing entries.
    pub fn merge_from(&mut self, other: &ModelState) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    /// Drop every entry whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
    }

    /// Checks that both states carry the same names with the same shapes.
    pub fn check_same_layout(&self, other: &ModelState) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::State(format!(
                "tensor count mismatch: {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.tensors.iter().zip(other.tensors.iter()) {
            if ka != kb {
                return Err(Error::State(format!("name mismatch: `{ka}` vs `{kb}`")));
            }
            if va.shape() != vb.shape() {
                return Err(Error::State(format!(
                    "shape mismatch for `{ka}`: {:?} vs {:?}",
                    va.shape(),
                    vb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Largest absolute entry-wise difference; `None` on layout mismatch.
    pub fn max_abs_diff(&self, other: &ModelState) -> Option<f64> {
        self.check_same_layout(other).ok()?;
        let mut worst = 0.0f64;
        for (a, b) in self.tensors.values().zip(other.tensors.values()) {
            for (x, y) in a.iter().zip(b.iter()) {
                worst = worst.max((x - y).abs());
            }
        }
        Some(worst)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Gradient accumulator keyed like [`ModelState`].
#[derive(Debug, Clone, Default)]
pub struct Grads {
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl Grads {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `g` into the gradient slot `name`, creating it if needed.
    pub fn accumulate(&mut self, name: &str, g: ArrayViewD<'_, f64>) {
        match self.tensors.get_mut(name) {
            Some(slot) => *slot += &g,
            None => {
                self.tensors.insert(name.to_string(), g.to_owned());
            }
        }
    }

    pub fn accumulate_owned<D: Dimension>(&mut self, name: &str, g: ndarray::Array<f64, D>) {
        match self.tensors.get_mut(name) {
            Some(slot) => *slot += &g.into_dyn(),
            None => {
                self.tensors.insert(name.to_string(), g.into_dyn());
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors.values_mut() {
            t.mapv_inplace(|v| v * s);
        }
    }

    pub fn merge(&mut self, other: Grads) {
        for (k, v) in other.tensors {
            self.accumulate_owned(&k, v);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Moves every entry whose name starts with `prefix` into a new accumulator.
    pub fn split_prefix(&mut self, prefix: &str) -> Grads {
        let keys: Vec<String> = self.tensors.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        let tensors = keys.into_iter().map(|k| {
            let v = self.tensors.remove(&k).expect("key listed above");
            (k, v)
        });
        Grads { tensors: tensors.collect() }
    }
}
