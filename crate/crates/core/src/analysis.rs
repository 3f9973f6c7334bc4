//! Diversity and overconfidence diagnostics.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{penultimate_features, ModelParams, NetworkSpec};
use crate::tensor::Matrix;

/// Pairwise agreement rates between k models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub k: usize,
    /// Row-major `k x k`.
    pub entries: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.k + j]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.k {
            let row: Vec<String> = (0..self.k).map(|j| self.get(i, j).to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn similarity_matrix(predictions: &[Vec<usize>]) -> Result<SimilarityMatrix> {
    let k = predictions.len();
    if k < 2 {
        return Err(Error::data("similarity needs at least two models"));
    }
    let n = predictions[0].len();
    if n == 0 {
        return Err(Error::data("similarity needs at least one example"));
    }
    if let Some(i) = predictions.iter().position(|p| p.len() != n) {
        return Err(Error::data(format!("model {i} has {} predictions, model 0 has {n}", predictions[i].len())));
    }
    let mut entries = vec![1.0; k * k];
    for i in 0..k {
        for j in i + 1..k {
            let same = predictions[i].iter().zip(&predictions[j]).filter(|(a, b)| a == b).count();
            let s = same as f64 / n as f64;
            entries[i * k + j] = s;
            entries[j * k + i] = s;
        }
    }
    Ok(SimilarityMatrix { k, entries })
}

pub fn mean_offdiagonal(sim: &SimilarityMatrix) -> Result<f64> {
    if sim.k < 2 {
        return Err(Error::data("mean off-diagonal similarity needs k >= 2"));
    }
    let mut sum = 0.0;
    for i in 0..sim.k {
        for j in 0..sim.k {
            if i != j {
                sum += sim.get(i, j);
            }
        }
    }
    Ok(sum / (sim.k * (sim.k - 1)) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub p90: f64,
    pub p95: f64,
}

impl LossStats {
    pub const CSV_HEADER: &'static str = "mean,std,p90,p95";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.mean, self.std, self.p90, self.p95)
    }
}

/// Percentile `q` in [0, 1] of ascending `sorted`, interpolating linearly
/// at the 1-based rank `1 + q (n - 1)`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn loss_stats(losses: &[f64]) -> Result<LossStats> {
    if losses.is_empty() {
        return Err(Error::data("loss statistics of an empty array"));
    }
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::data(format!("loss {i} is not finite")));
    }
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n;
    let mut sorted = losses.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(LossStats { mean, std: var.sqrt(), p90: percentile(&sorted, 0.90), p95: percentile(&sorted, 0.95) })
}

/// CSV with a header `f0,...,f{w-1},label` and one row of eval-mode
/// penultimate activations per example.
pub fn penultimate_csv(features: &Matrix, labels: &[usize]) -> String {
    let mut out = String::with_capacity(features.len() * 12);
    for j in 0..features.cols() {
        let _ = write!(out, "f{j},");
    }
    out.push_str("label\n");
    for (row, label) in features.iter_rows().zip(labels) {
        for v in row {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{label}");
    }
    out
}

pub fn export_penultimate_features(params: &ModelParams, spec: &NetworkSpec, dataset: &Dataset, path: &Path) -> Result<()> {
    let features = penultimate_features(params, spec, &dataset.features)?;
    std::fs::write(path, penultimate_csv(&features, &dataset.labels)).map_err(|e| Error::io(path, e))
}
