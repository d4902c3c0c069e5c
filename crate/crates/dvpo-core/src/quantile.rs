//! Quantile grids, per-state quantile vectors, and tail index bookkeeping.
//!
//! A value distribution is represented by M quantile values on the fixed
//! grid of levels j/M. Head outputs are not forced monotone across j; raw
//! quantile crossings are legal and consumers that need ordered values go
//! through [`QuantileVector::sort_permutation`].

use serde::Serialize;

use crate::error::{Error, Result};

/// Evenly spaced quantile levels j/M for j = 1..=M.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileGrid {
    m: usize,
    levels: Vec<f64>,
}

impl QuantileGrid {
    pub fn new(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::config("quantile.m", "must be at least 1"));
        }
        let levels = (1..=m).map(|j| j as f64 / m as f64).collect();
        Ok(QuantileGrid { m, levels })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }
}

/// M quantile values aligned with a grid. Always finite and nonempty;
/// construction validates both so downstream math can skip the checks.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct QuantileVector(Vec<f64>);

impl QuantileVector {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::Empty("quantile vector"));
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("quantile vector"));
        }
        Ok(QuantileVector(theta))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        // Construction rejects empty vectors, so this is always false.
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Expectation of the represented distribution: the plain mean of the
    /// quantile values.
    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }

    /// Indices that sort the values ascending. Stable: equal values keep
    /// their original relative order.
    pub fn sort_permutation(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.0.len()).collect();
        // Finiteness is a construction invariant, so the comparison is total.
        perm.sort_by(|&a, &b| self.0[a].partial_cmp(&self.0[b]).unwrap());
        perm
    }

    /// Population variance over the entries selected by `indices`.
    pub fn tail_variance(&self, indices: &[usize]) -> Result<f64> {
        if indices.is_empty() {
            return Err(Error::Empty("tail variance index set"));
        }
        for &i in indices {
            if i >= self.0.len() {
                return Err(Error::ShapeMismatch {
                    what: "tail variance index",
                    expected: self.0.len(),
                    got: i,
                });
            }
        }
        let n = indices.len() as f64;
        let mean = indices.iter().map(|&i| self.0[i]).sum::<f64>() / n;
        let var = indices
            .iter()
            .map(|&i| (self.0[i] - mean).powi(2))
            .sum::<f64>()
            / n;
        Ok(var)
    }
}

impl std::ops::Index<usize> for QuantileVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Lower and upper tail index counts for an M-point grid: K_α = ⌊αM⌋ values
/// from the low end and K_β = ⌊βM⌋ from the high end, both in sorted order.
/// A fraction of zero disables that tail (its K is 0 and every tail-specific
/// loss term vanishes).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailSpec {
    alpha: f64,
    beta: f64,
    m: usize,
    k_alpha: usize,
    k_beta: usize,
}

fn tail_count(fraction: f64, m: usize) -> usize {
    // Nudge before flooring so that fractions like 0.3 with M=10, which land
    // a hair below the mathematical product in binary, still floor to 3.
    (fraction * m as f64 + 1e-9).floor() as usize
}

impl TailSpec {
    pub fn new(alpha: f64, beta: f64, m: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config("tails.alpha", "must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::config("tails.beta", "must be in [0, 1]"));
        }
        if m == 0 {
            return Err(Error::config("quantile.m", "must be at least 1"));
        }
        let k_alpha = tail_count(alpha, m);
        let k_beta = tail_count(beta, m);
        if k_alpha + k_beta > m {
            return Err(Error::config(
                "tails",
                format!("tails overlap: k_alpha {k_alpha} + k_beta {k_beta} > m {m}"),
            ));
        }
        Ok(TailSpec {
            alpha,
            beta,
            m,
            k_alpha,
            k_beta,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn k_alpha(&self) -> usize {
        self.k_alpha
    }

    pub fn k_beta(&self) -> usize {
        self.k_beta
    }

    pub fn lower_enabled(&self) -> bool {
        self.k_alpha >= 1
    }

    pub fn upper_enabled(&self) -> bool {
        self.k_beta >= 1
    }

    /// Positions of the lower tail within a sorted permutation.
    pub fn lower_sorted_range(&self) -> std::ops::Range<usize> {
        0..self.k_alpha
    }

    /// Positions of the upper tail within a sorted permutation.
    pub fn upper_sorted_range(&self) -> std::ops::Range<usize> {
        self.m - self.k_beta..self.m
    }
}
