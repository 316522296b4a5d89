use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Ordered, uniquely named collection of tensors.
///
/// Used for network parameters, their gradients, regularizer weights and
/// optimizer moments; all of these share one layout.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::Layout(format!("duplicate parameter `{name}`")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// Same names and shapes, all values set to `value`.
    pub fn filled_like(&self, value: f64) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::filled(t.shape(), value)))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.filled_like(0.0)
    }

    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Layout(format!("{} tensors vs {}", self.len(), other.len())));
        }
        for ((a, ta), (b, tb)) in self.iter().zip(other.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(Error::Layout(format!(
                    "`{a}` {:?} vs `{b}` {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Flat view over every scalar, in entry order.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors().flat_map(|t| t.data().iter().copied())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values().collect()
    }

    /// Overwrites every scalar from `flat`, which must hold `numel()` values.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::Layout(format!(
                "flat vector of {} for {} parameters",
                flat.len(),
                self.numel()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Element-wise combination of two sets with identical layout.
    pub fn zip_map(&self, other: &ParamSet, f: impl Fn(f64, f64) -> f64) -> Result<ParamSet> {
        self.check_layout(other)?;
        let entries = self
            .entries
            .iter()
            .zip(other.tensors())
            .map(|((n, a), b)| {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                (n.clone(), Tensor::from_parts(a.shape().to_vec(), data))
            })
            .collect();
        Ok(ParamSet { entries })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamSet {
        ParamSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.map(&f))).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    /// Panics on duplicate names.
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        let mut ps = ParamSet::new();
        for (n, t) in iter {
            ps.push(n, t).expect("duplicate parameter name");
        }
        ps
    }
}
