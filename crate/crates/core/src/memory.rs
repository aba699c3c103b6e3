//! Per-sample memory for adaptation: the momentum bank of non-parametric
//! predictions and the bank of most recent target features.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{CpgaError, Result};
use crate::linalg;
use crate::losses::Temperature;
pub use crate::losses::nonparametric_predict;

/// Initial content of the prediction bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankInit {
    #[default]
    Zero,
    Uniform,
}

fn check_unique(indices: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in indices {
        if i >= n {
            return Err(CpgaError::Contract(format!("bank index {i} out of range for {n} rows")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(CpgaError::Contract(format!("bank index {i} repeated within a batch")));
        }
    }
    Ok(())
}

/// `H`: momentum-averaged non-parametric predictions, one row per target
/// sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBank {
    rows: Array2<f64>,
    beta: f64,
}

impl PredictionBank {
    pub fn new(num_samples: usize, num_classes: usize, beta: f64, init: BankInit) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(CpgaError::config("beta", format!("must be in [0, 1], got {beta}")));
        }
        let fill = match init {
            BankInit::Zero => 0.0,
            BankInit::Uniform => 1.0 / num_classes as f64,
        };
        Ok(PredictionBank {
            rows: Array2::from_elem((num_samples, num_classes), fill),
            beta,
        })
    }

    pub fn from_rows(rows: Array2<f64>, beta: f64) -> Self {
        PredictionBank { rows, beta }
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    pub fn gather(&self, indices: &[usize]) -> Array2<f64> {
        self.rows.select(Axis(0), indices)
    }

    /// `h_i <- beta h_i + (1 - beta) o_i` for each batch row.
    pub fn update(&mut self, indices: &[usize], o: ArrayView2<f64>) -> Result<()> {
        check_unique(indices, self.rows.nrows())?;
        if o.nrows() != indices.len() || o.ncols() != self.rows.ncols() {
            return Err(CpgaError::Shape("prediction batch does not match bank".into()));
        }
        for (&i, oi) in indices.iter().zip(o.rows()) {
            let mut h = self.rows.row_mut(i);
            h *= self.beta;
            h.scaled_add(1.0 - self.beta, &oi);
        }
        Ok(())
    }
}

/// `Q`: the latest feature of every target sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    rows: Array2<f64>,
}

impl FeatureBank {
    pub fn new(features: Array2<f64>) -> Self {
        FeatureBank { rows: features }
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn update(&mut self, indices: &[usize], q: ArrayView2<f64>) -> Result<()> {
        check_unique(indices, self.rows.nrows())?;
        if q.nrows() != indices.len() || q.ncols() != self.rows.ncols() {
            return Err(CpgaError::Shape("feature batch does not match bank".into()));
        }
        for (&i, qi) in indices.iter().zip(q.rows()) {
            self.rows.row_mut(i).assign(&qi);
        }
        Ok(())
    }

    /// `s_ij = softmax_{j != i}(cos(q_i, q_j) / tau)`, returned in bank
    /// order with entry `i` removed (length `n - 1`).
    pub fn neighbor_similarities(&self, anchor: usize, tau: Temperature) -> Result<Array1<f64>> {
        let n = self.rows.nrows();
        if n < 2 {
            return Err(CpgaError::Contract("feature bank needs at least 2 entries".into()));
        }
        if anchor >= n {
            return Err(CpgaError::Contract(format!("anchor {anchor} out of range")));
        }
        let (unit, _) = linalg::l2_normalize_rows(self.rows.view());
        let sims = unit.dot(&unit.row(anchor));
        let others: Vec<f64> = sims
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != anchor)
            .map(|(_, &s)| s)
            .collect();
        let row = Array2::from_shape_vec((1, n - 1), others).expect("row shape");
        Ok(linalg::softmax_rows(row.view(), 1.0 / tau.get()).row(0).to_owned())
    }
}
