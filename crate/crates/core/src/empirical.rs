//! Cross-sectional empirical distribution functions.
//!
//! Rank convention: the i-th order statistic sits at (i − 0.5)/n, and tied
//! samples all take the highest rank of their group, so F̂(x) estimates
//! P{Y ≤ x} and stays strictly inside (0, 1) on the sample.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SampleSet {
    values: Vec<f64>,
    sorted_index: Vec<usize>,
}

impl SampleSet {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::data("sample set must not be empty"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!("non-finite sample at index {i}: {}", values[i])));
        }
        let mut sorted_index: Vec<usize> = (0..values.len()).collect();
        // stable: ties keep their original order
        sorted_index.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        Ok(Self { values, sorted_index })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sorted_index(&self) -> &[usize] {
        &self.sorted_index
    }

    pub fn sorted_values(&self) -> Vec<f64> {
        self.sorted_index.iter().map(|&i| self.values[i]).collect()
    }

    /// Rank (1-based, highest among ties) of every sample, in original order.
    pub fn upper_ranks(&self) -> Vec<usize> {
        let n = self.len();
        let mut ranks = vec![0usize; n];
        let mut end = n;
        // walk from the top so each tie group learns its highest rank first
        while end > 0 {
            let top = self.values[self.sorted_index[end - 1]];
            let mut start = end - 1;
            while start > 0 && self.values[self.sorted_index[start - 1]] == top {
                start -= 1;
            }
            for &idx in &self.sorted_index[start..end] {
                ranks[idx] = end;
            }
            end = start;
        }
        ranks
    }

    /// F̂ evaluated at every sample of this set, in original order.
    pub fn self_pit(&self) -> Vec<f64> {
        let n = self.len() as f64;
        self.upper_ranks()
            .into_iter()
            .map(|r| (r as f64 - 0.5) / n)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct EmpiricalCDF {
    sorted: Vec<f64>,
}

impl EmpiricalCDF {
    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// Right-continuous step function; 0 below the smallest sample.
    pub fn eval(&self, x: f64) -> f64 {
        let k = self.sorted.partition_point(|&v| v <= x);
        if k == 0 {
            0.0
        } else {
            (k as f64 - 0.5) / self.sorted.len() as f64
        }
    }

    /// Midpoint-rank value of the i-th order statistic (1-based).
    pub fn at_rank(&self, i: usize) -> f64 {
        (i as f64 - 0.5) / self.sorted.len() as f64
    }
}

pub fn build_ecdf(samples: &SampleSet) -> EmpiricalCDF {
    EmpiricalCDF {
        sorted: samples.sorted_values(),
    }
}

pub fn pit_transform(cdf: &EmpiricalCDF, samples: &SampleSet) -> Vec<f64> {
    samples.values().iter().map(|&x| cdf.eval(x)).collect()
}

/// Kolmogorov–Smirnov distance between the empirical law of `values` and U(0,1).
pub fn ks_uniformity(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::data("KS statistic of an empty sample"));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::domain(format!("value {v} outside [0,1] in uniformity test")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let d = sorted
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let above = (i as f64 + 1.0) / n - v;
            let below = v - i as f64 / n;
            above.max(below)
        })
        .fold(0.0_f64, f64::max);
    Ok(d)
}

/// Two-sample KS distance between empirical laws.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::data("KS statistic of an empty sample"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0_f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}
