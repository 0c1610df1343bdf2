//! Clustering evaluation: k-means, Hungarian-matched accuracy, normalized
//! mutual information and soft-score histograms.

mod hungarian;
mod kmeans;

pub use hungarian::hungarian;
pub use kmeans::{assign_nearest, kmeans, lloyd, KMeansConfig, KMeansResult};

use crate::error::{config_err, Result};
use crate::matrix::Matrix;
use crate::tensor::Real;

fn check_lengths(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return config_err(format!("{} predicted labels vs {} true labels", pred.len(), truth.len()));
    }
    Ok(())
}

/// Co-assignment counts, `counts[p * size + t]`, padded to a square of side
/// `max(#pred labels, #true labels)`.
pub fn contingency(pred: &[usize], truth: &[usize]) -> (Vec<u64>, usize) {
    let size = pred.iter().chain(truth).max().map_or(0, |&m| m + 1);
    let mut counts = vec![0u64; size * size];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[p * size + t] += 1;
    }
    (counts, size)
}

/// Best one-to-one map from predicted to true labels: `mapping[p] = t`.
pub fn best_mapping(pred: &[usize], truth: &[usize]) -> Result<Vec<usize>> {
    check_lengths(pred, truth)?;
    let (counts, size) = contingency(pred, truth);
    let cost: Vec<f64> = counts.iter().map(|&c| -(c as f64)).collect();
    Ok(hungarian(&cost, size))
}

/// Clustering accuracy under the optimal label mapping.
pub fn acc(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let mapping = best_mapping(pred, truth)?;
    let hits = pred.iter().zip(truth).filter(|&(&p, &t)| mapping[p] == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

fn entropy(counts: impl Iterator<Item = u64>, m: f64) -> f64 {
    counts.filter(|&c| c > 0).map(|c| c as f64 / m).map(|p| -p * p.ln()).sum()
}

/// `MI(pred, truth) / max(H(pred), H(truth))`, with `0/0` taken as 0.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let (counts, size) = contingency(pred, truth);
    let m = pred.len() as f64;
    let row: Vec<u64> = (0..size).map(|p| counts[p * size..(p + 1) * size].iter().sum()).collect();
    let col: Vec<u64> = (0..size).map(|t| (0..size).map(|p| counts[p * size + t]).sum()).collect();
    let mut mi = 0.0;
    for p in 0..size {
        for t in 0..size {
            let c = counts[p * size + t];
            if c > 0 {
                let c = c as f64;
                mi += c / m * (c * m / (row[p] as f64 * col[t] as f64)).ln();
            }
        }
    }
    let denom = entropy(row.into_iter(), m).max(entropy(col.into_iter(), m));
    if denom <= 0.0 {
        return Ok(0.0);
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

/// Fixed 4-decimal rendering used for every reported metric.
pub fn fmt_metric(x: f64) -> String {
    format!("{x:.4}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` uniform edges over `[0, 1]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Fraction of the mass in the bins `range`.
    pub fn mass(&self, range: std::ops::Range<usize>) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.counts[range].iter().sum::<usize>() as f64 / total as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{:.4},{:.4},{c}\n", self.edges[i], self.edges[i + 1]));
        }
        out
    }
}

/// Histogram of column `j` of a score matrix over `[0, 1]`; a score of
/// exactly 1 lands in the last bin.
pub fn score_histogram<T: Real>(s: &Matrix<T>, j: usize, bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return config_err("histogram needs at least two bins");
    }
    if j >= s.cols() {
        return config_err(format!("cluster index {j} out of range for {} clusters", s.cols()));
    }
    let mut counts = vec![0usize; bins];
    for row in s.iter_rows() {
        let v = row[j].f64().clamp(0.0, 1.0);
        counts[((v * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    Ok(Histogram { edges, counts })
}
