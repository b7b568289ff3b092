//! Points of the Kingman simplex with finite support.

use serde::{Deserialize, Serialize};

/// A descending, finitely supported vector with entries in `[0, 1]` and sum at most one.
///
/// Only the non-zero entries are stored; comparisons ignore trailing zeros.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KingmanVector {
    entries: Vec<f64>,
}

impl KingmanVector {
    /// Sorts `values` descending and drops the zeros.
    pub fn from_unsorted(mut values: Vec<f64>) -> Self {
        values.retain(|v| *v > 0.0);
        values.sort_by(|a, b| b.total_cmp(a));
        Self { entries: values }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Number of non-zero entries.
    pub fn support_len(&self) -> usize {
        self.entries.len()
    }

    pub fn sum(&self) -> f64 {
        self.entries.iter().sum()
    }

    /// `phi_m(x) = sum_i x_i^m`.
    pub fn phi(&self, m: u32) -> f64 {
        self.entries.iter().map(|x| x.powi(m as i32)).sum()
    }

    /// The `k` largest entries, zero-padded.
    pub fn top(&self, k: usize) -> Vec<f64> {
        (0..k)
            .map(|i| self.entries.get(i).copied().unwrap_or(0.0))
            .collect()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        if factor <= 0.0 {
            return Self::zero();
        }
        Self {
            entries: self.entries.iter().map(|x| x * factor).collect(),
        }
    }
}

/// `phi_m(x)` for `m >= 2`.
pub fn phi_m(x: &KingmanVector, m: u32) -> f64 {
    assert!(m >= 2, "phi_m is defined here for m >= 2");
    x.phi(m)
}
