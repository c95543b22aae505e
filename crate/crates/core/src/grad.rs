//! Sparse gradients over a flat parameter vector.

use std::collections::BTreeMap;

/// Coordinate -> value, iterated in coordinate order so accumulation is
/// reproducible.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseGrad {
    entries: BTreeMap<usize, f64>,
}

impl SparseGrad {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, index: usize, value: f64) {
        *self.entries.entry(index).or_insert(0.0) += value;
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &SparseGrad, scale: f64) {
        for (&i, &v) in &other.entries {
            self.add(i, scale * v);
        }
    }

    pub fn scaled(mut self, scale: f64) -> Self {
        self.entries.values_mut().for_each(|v| *v *= scale);
        self
    }

    pub fn get(&self, index: usize) -> f64 {
        self.entries.get(&index).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries.iter().map(|(&i, &v)| (i, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.entries.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.entries.values().sum()
    }

    pub fn to_dense(&self, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        for (&i, &v) in &self.entries {
            out[i] += v;
        }
        out
    }

    /// Largest absolute coordinate-wise difference, treating missing entries
    /// as zero.
    pub fn max_abs_diff(&self, other: &SparseGrad) -> f64 {
        self.entries
            .keys()
            .chain(other.entries.keys())
            .map(|&i| (self.get(i) - other.get(i)).abs())
            .fold(0.0, f64::max)
    }
}

impl FromIterator<(usize, f64)> for SparseGrad {
    fn from_iter<T: IntoIterator<Item = (usize, f64)>>(iter: T) -> Self {
        let mut g = SparseGrad::new();
        for (i, v) in iter {
            g.add(i, v);
        }
        g
    }
}
