//! Pseudo labels for the unlabeled target set: probability-weighted initial
//! centroids, cosine nearest-centroid assignment, per-epoch centroid
//! refresh and confidence weights.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{CpgaError, Result};
use crate::linalg;
use crate::losses::Temperature;

/// Below this total probability mass a class is treated as empty during
/// centroid initialization.
pub const DEGENERATE_MASS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    pub centroids: Array2<f64>,
    pub epoch: usize,
}

impl CentroidSet {
    pub fn num_classes(&self) -> usize {
        self.centroids.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
}

impl PseudoLabels {
    pub fn mean_weight(&self) -> f64 {
        self.weights.iter().sum::<f64>() / self.weights.len().max(1) as f64
    }

    /// Fraction of labels equal to `truth`.
    pub fn accuracy(&self, truth: &[usize]) -> f64 {
        crate::training::accuracy(&self.labels, truth)
    }

    /// Columnar dump: header `label,weight`, one row per sample.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "label,weight")?;
        for (y, w) in self.labels.iter().zip(&self.weights) {
            writeln!(out, "{y},{w}")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// `c_k = sum_i p_ik q_i / sum_i p_ik`. A class whose probability mass is
/// below [`DEGENERATE_MASS`] takes the matching row of `fallback` (the
/// classifier's class direction) instead.
pub fn init_centroids(
    features: ArrayView2<f64>,
    probs: ArrayView2<f64>,
    fallback: ArrayView2<f64>,
) -> Result<CentroidSet> {
    if features.nrows() != probs.nrows() {
        return Err(CpgaError::Shape(format!(
            "{} features but {} probability rows",
            features.nrows(),
            probs.nrows()
        )));
    }
    let k = probs.ncols();
    if fallback.dim() != (k, features.ncols()) {
        return Err(CpgaError::Shape("fallback directions do not match centroids".into()));
    }
    let mass = probs.sum_axis(Axis(0));
    let mut centroids = probs.t().dot(&features);
    for c in 0..k {
        if mass[c] < DEGENERATE_MASS {
            centroids.row_mut(c).assign(&fallback.row(c));
        } else {
            centroids.row_mut(c).mapv_inplace(|v| v / mass[c]);
        }
    }
    Ok(CentroidSet {
        centroids,
        epoch: 0,
    })
}

/// Cosine nearest centroid per feature; ties go to the lowest class.
/// Similarities closer than this count as tied, so equal directions with
/// different norms resolve to the lowest class.
const TIE_TOLERANCE: f64 = 1e-12;

pub fn assign_labels(features: ArrayView2<f64>, centroids: &CentroidSet) -> Vec<usize> {
    let sims = linalg::cosine_matrix(features, centroids.centroids.view());
    sims.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] + TIE_TOLERANCE {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Class means under the current labels; an empty class keeps its previous
/// centroid.
pub fn refresh_centroids(
    features: ArrayView2<f64>,
    labels: &[usize],
    previous: &CentroidSet,
) -> Result<CentroidSet> {
    let k = previous.num_classes();
    if labels.len() != features.nrows() {
        return Err(CpgaError::Shape("one label per feature row required".into()));
    }
    let mut sums = Array2::<f64>::zeros((k, features.ncols()));
    let mut counts = Array1::<f64>::zeros(k);
    for (row, &y) in features.rows().into_iter().zip(labels) {
        if y >= k {
            return Err(CpgaError::Contract(format!("label {y} out of range")));
        }
        sums.row_mut(y).scaled_add(1.0, &row);
        counts[y] += 1.0;
    }
    for c in 0..k {
        if counts[c] == 0.0 {
            sums.row_mut(c).assign(&previous.centroids.row(c));
        } else {
            sums.row_mut(c).mapv_inplace(|v| v / counts[c]);
        }
    }
    Ok(CentroidSet {
        centroids: sums,
        epoch: previous.epoch + 1,
    })
}

/// `w_i = exp(cos(q_i, c_{y_i}) / tau) / sum_k exp(cos(q_i, c_k) / tau)`.
pub fn confidence(
    features: ArrayView2<f64>,
    centroids: &CentroidSet,
    labels: &[usize],
    tau: Temperature,
) -> Vec<f64> {
    let sims = linalg::cosine_matrix(features, centroids.centroids.view());
    let soft = linalg::softmax_rows(sims.view(), 1.0 / tau.get());
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| soft[[i, y]])
        .collect()
}

/// Labels and weights in one pass.
pub fn pseudo_label(features: ArrayView2<f64>, centroids: &CentroidSet, tau: Temperature) -> PseudoLabels {
    let labels = assign_labels(features, centroids);
    let weights = confidence(features, centroids, &labels, tau);
    PseudoLabels { labels, weights }
}
