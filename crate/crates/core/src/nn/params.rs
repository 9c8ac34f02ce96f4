use sha2::{Digest, Sha256};

use crate::tensor::{Graph, LeafKind, Real, Tensor, TensorError, Var};

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T: Real = f32> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.entries.push((name.into(), value));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every tensor on `g` as a leaf of the given kind.
    pub fn bind(&self, g: &mut Graph<T>, kind: LeafKind) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| g.leaf(t.clone(), kind)).collect()
    }

    /// True when both sets have the same names and shapes in the same order.
    pub fn same_layout<U: Real>(&self, other: &ParamSet<U>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }

    pub fn check_layout<U: Real>(&self, other: &ParamSet<U>) -> Result<(), TensorError> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch { op: "parameter set", detail: "layouts differ".into() })
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }

    /// Replaces the tensor values, keeping names; shapes must match.
    pub fn set_values(&mut self, values: Vec<Tensor<T>>) -> Result<(), TensorError> {
        if values.len() != self.entries.len() {
            return Err(TensorError::ShapeMismatch { op: "set_values", detail: format!("{} vs {}", values.len(), self.entries.len()) });
        }
        for ((name, old), new) in self.entries.iter_mut().zip(values) {
            if old.shape() != new.shape() {
                return Err(TensorError::ShapeMismatch { op: "set_values", detail: format!("{name}: {:?} vs {:?}", old.shape(), new.shape()) });
            }
            *old = new;
        }
        Ok(())
    }

    pub(crate) fn hash_into(&self, hasher: &mut Sha256) {
        for (name, t) in &self.entries {
            hasher.update(name.as_bytes());
            for v in t.data() {
                hasher.update(v.as_f64().to_le_bytes());
            }
        }
    }

    /// Euclidean distance between two sets with the same layout.
    pub fn distance(&self, other: &ParamSet<T>) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .flat_map(|((_, a), (_, b))| a.data().iter().zip(b.data()))
            .map(|(&x, &y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}
