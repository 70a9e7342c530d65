use std::collections::BTreeMap;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named 2-D parameter tensors in a deterministic (sorted) order. Vectors are
/// stored as `[1, n]` rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.get_mut(name)
    }

    pub(crate) fn expect(&self, name: &str) -> &Array2<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn require(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Array2::zeros(v.dim())))
                .collect(),
        }
    }

    /// `self += other` for every tensor present in both.
    pub fn add_assign(&mut self, other: &ParamStore) {
        for (k, v) in &mut self.tensors {
            if let Some(o) = other.tensors.get(k) {
                *v += o;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.tensors.values_mut() {
            v.mapv_inplace(|x| x * factor);
        }
    }

    /// SHA-256 over names, shapes and little-endian values of the selected
    /// tensors (all tensors when `filter` accepts everything).
    pub fn checksum_filtered(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.tensors {
            if !filter(k) {
                continue;
            }
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            let (r, c) = v.dim();
            h.update((r as u64).to_le_bytes());
            h.update((c as u64).to_le_bytes());
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn checksum(&self) -> String {
        self.checksum_filtered(|_| true)
    }
}
