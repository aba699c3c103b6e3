//! Differentiable objectives. Every loss is a batch mean and returns its
//! value together with the gradient w.r.t. each differentiable input.

mod objective;

pub use objective::{
    stage1_objective, stage2_objective, LossToggles, Stage1Loss, Stage2Batch, Stage2Loss,
    TradeOffs,
};

use ndarray::{Array2, ArrayView1, ArrayView2, Zip};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CpgaError, Result};
use crate::linalg;

/// Lower clamp applied inside every logarithm.
pub const LOG_EPS: f64 = 1e-7;

/// Tolerance on unit-norm contrastive rows.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Softmax temperature; always positive.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub const DEFAULT: Temperature = Temperature(0.07);

    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Temperature(tau))
        } else {
            Err(CpgaError::config("tau", format!("must be positive, got {tau}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl TryFrom<f64> for Temperature {
    type Error = CpgaError;
    fn try_from(v: f64) -> Result<Self> {
        Temperature::new(v)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// A scalar loss and the gradient w.r.t. one input.
#[derive(Debug, Clone)]
pub struct Loss {
    pub value: f64,
    pub grad: Array2<f64>,
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(CpgaError::Shape(format!("{} labels for {} rows", labels.len(), n)));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(CpgaError::Contract(format!("label {bad} out of range for {k} classes")));
    }
    Ok(())
}

/// Cross entropy of probability rows against hard labels, probabilities
/// clamped to `[LOG_EPS, 1]`.
pub fn ce_prototype(probs: ArrayView2<f64>, labels: &[usize]) -> Result<Loss> {
    label_smoothing_ce(probs, labels, 0.0)
}

/// Cross entropy against `(1 - alpha) * onehot + alpha / K`.
pub fn label_smoothing_ce(probs: ArrayView2<f64>, labels: &[usize], alpha: f64) -> Result<Loss> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(CpgaError::config("alpha_smoothing", format!("must be in [0, 1), got {alpha}")));
    }
    let (n, k) = probs.dim();
    check_labels(labels, n, k)?;
    let mut grad = Array2::zeros((n, k));
    let mut total = 0.0;
    let off = alpha / k as f64;
    for (i, &y) in labels.iter().enumerate() {
        for c in 0..k {
            let target = if c == y { 1.0 - alpha + off } else { off };
            if target == 0.0 {
                continue;
            }
            let p = probs[[i, c]];
            let clamped = p.clamp(LOG_EPS, 1.0);
            total -= target * clamped.ln();
            if p > LOG_EPS && p <= 1.0 {
                grad[[i, c]] = -target / (p * n as f64);
            }
        }
    }
    Ok(Loss {
        value: total / n as f64,
        grad,
    })
}

/// For each anchor prototype: one positive of the same class and one
/// negative from every other class.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPlan {
    pub positive: Vec<usize>,
    pub negatives: Vec<Vec<usize>>,
}

/// Draws positives and negatives uniformly. Every one of the `num_classes`
/// classes must appear at least twice.
pub fn sample_pairs<R: Rng>(labels: &[usize], num_classes: usize, rng: &mut R) -> Result<PairPlan> {
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(CpgaError::Contract(format!("label {y} out of range")));
        }
        by_class[y].push(i);
    }
    if let Some(c) = by_class.iter().position(|m| m.len() < 2) {
        return Err(CpgaError::Contract(format!(
            "class {c} has {} prototypes; at least 2 are required",
            by_class[c].len()
        )));
    }
    let mut positive = Vec::with_capacity(labels.len());
    let mut negatives = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        let others: Vec<usize> = by_class[y].iter().copied().filter(|&j| j != i).collect();
        positive.push(*others.choose(rng).expect("class has a second member"));
        let negs = (0..num_classes)
            .filter(|&c| c != y)
            .map(|c| *by_class[c].choose(rng).expect("class is populated"))
            .collect();
        negatives.push(negs);
    }
    Ok(PairPlan {
        positive,
        negatives,
    })
}

/// InfoNCE over cosine similarities between prototypes:
/// `-log( e^{s+/tau} / (e^{s+/tau} + sum_j e^{s-_j/tau}) )`, averaged over
/// anchors. The gradient reaches anchors, positives and negatives.
pub fn prototype_infonce(prototypes: ArrayView2<f64>, plan: &PairPlan, tau: Temperature) -> Result<Loss> {
    let n = prototypes.nrows();
    if plan.positive.len() != n || plan.negatives.len() != n {
        return Err(CpgaError::Shape("pair plan does not match prototype count".into()));
    }
    let t = tau.get();
    let (unit, norms) = linalg::l2_normalize_rows(prototypes);
    let mut dunit = Array2::<f64>::zeros(unit.raw_dim());
    let mut total = 0.0;
    for a in 0..n {
        let mut partners = Vec::with_capacity(1 + plan.negatives[a].len());
        partners.push(plan.positive[a]);
        partners.extend(&plan.negatives[a]);
        let sims: Vec<f64> = partners.iter().map(|&j| unit.row(a).dot(&unit.row(j)) / t).collect();
        let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = sims.iter().map(|s| (s - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - sims[0];
        for (slot, (&j, &s)) in partners.iter().zip(&sims).enumerate() {
            let softmax = (s - lse).exp();
            let g = (softmax - if slot == 0 { 1.0 } else { 0.0 }) / (t * n as f64);
            let (ua, uj) = (unit.row(a).to_owned(), unit.row(j).to_owned());
            dunit.row_mut(a).scaled_add(g, &uj);
            dunit.row_mut(j).scaled_add(g, &ua);
        }
    }
    let grad = linalg::l2_normalize_backward(unit.view(), norms.view(), dunit.view());
    Ok(Loss {
        value: total / n as f64,
        grad,
    })
}

fn check_unit_rows(m: ArrayView2<f64>, what: &str) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        let norm = linalg::l2_norm(row);
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(CpgaError::Contract(format!("{what} row {i} has norm {norm}")));
        }
    }
    Ok(())
}

/// Value and gradients of the weighted prototype contrastive loss.
#[derive(Debug, Clone)]
pub struct ContrastiveLoss {
    pub value: f64,
    pub grad_u: Array2<f64>,
    pub grad_v: Array2<f64>,
}

/// `-w_i log softmax(u_i . v / tau)[y_i]`, averaged over anchors. `v` holds
/// exactly one unit-norm prototype per class, ordered by class.
pub fn weighted_contrastive(
    u: ArrayView2<f64>,
    v: ArrayView2<f64>,
    labels: &[usize],
    weights: &[f64],
    num_classes: usize,
    tau: Temperature,
) -> Result<ContrastiveLoss> {
    if v.nrows() != num_classes {
        return Err(CpgaError::Shape(format!(
            "expected one prototype per class ({num_classes}), got {}",
            v.nrows()
        )));
    }
    if u.ncols() != v.ncols() {
        return Err(CpgaError::Shape("anchor and prototype widths differ".into()));
    }
    let n = u.nrows();
    check_labels(labels, n, num_classes)?;
    if weights.len() != n {
        return Err(CpgaError::Shape(format!("{} weights for {n} anchors", weights.len())));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(CpgaError::Contract(format!("confidence weight {w} is not in [0, inf)")));
    }
    check_unit_rows(u, "anchor")?;
    check_unit_rows(v, "prototype")?;
    let t = tau.get();
    let logits = u.dot(&v.t());
    let probs = linalg::softmax_rows(logits.view(), 1.0 / t);
    let mut dlogits = probs.clone();
    let mut total = 0.0;
    for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x / t));
        let lse = max + row.iter().map(|&x| (x / t - max).exp()).sum::<f64>().ln();
        total -= w * (row[y] / t - lse);
        dlogits[[i, y]] -= 1.0;
        dlogits.row_mut(i).mapv_inplace(|g| g * w / (t * n as f64));
    }
    Ok(ContrastiveLoss {
        value: total / n as f64,
        grad_u: dlogits.dot(&v),
        grad_v: dlogits.t().dot(&u),
    })
}

/// Non-parametric predictions `o_ik = softmax_k(u_i . v_k / tau)`.
pub fn nonparametric_predict(u: ArrayView2<f64>, v: ArrayView2<f64>, tau: Temperature) -> Result<Array2<f64>> {
    check_unit_rows(u, "anchor")?;
    check_unit_rows(v, "prototype")?;
    Ok(linalg::softmax_rows(u.dot(&v.t()).view(), 1.0 / tau.get()))
}

/// Backward of [`nonparametric_predict`]: maps `do` onto `(du, dv)`.
pub fn nonparametric_backward(
    u: ArrayView2<f64>,
    v: ArrayView2<f64>,
    o: ArrayView2<f64>,
    d_o: ArrayView2<f64>,
    tau: Temperature,
) -> (Array2<f64>, Array2<f64>) {
    let dlogits = linalg::softmax_backward(o, d_o, 1.0 / tau.get());
    (dlogits.dot(&v), dlogits.t().dot(&u))
}

/// Early-learning regularizer `mean log(1 - clamp(o_i . h_i, 0, 1 - eps))`.
/// `h` is a stored constant; the gradient is w.r.t. `o` only.
pub fn elr(o: ArrayView2<f64>, h: ArrayView2<f64>) -> Result<Loss> {
    if o.dim() != h.dim() {
        return Err(CpgaError::Shape(format!("predictions {:?} vs history {:?}", o.dim(), h.dim())));
    }
    let n = o.nrows();
    let mut grad = Array2::zeros(o.raw_dim());
    let mut total = 0.0;
    Zip::from(grad.rows_mut())
        .and(o.rows())
        .and(h.rows())
        .for_each(|mut g, oi, hi| {
            let dot = oi.dot(&hi);
            let clamped = dot.clamp(0.0, 1.0 - LOG_EPS);
            total += (1.0 - clamped).ln();
            if clamped == dot {
                g.assign(&hi.mapv(|x| -x / ((1.0 - dot) * n as f64)));
            }
        });
    Ok(Loss {
        value: total / n as f64,
        grad,
    })
}

fn entropy(row: ArrayView1<f64>) -> f64 {
    -row.iter().filter(|&&s| s > 0.0).map(|&s| s * s.ln()).sum::<f64>()
}

/// Mean entropy of similarity rows, with `0 log 0 = 0`. Each row must be
/// a distribution (sum 1 within 1e-6).
pub fn neighborhood_clustering(s: ArrayView2<f64>) -> Result<Loss> {
    let n = s.nrows();
    for (i, row) in s.rows().into_iter().enumerate() {
        let sum = row.sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&x| x < 0.0) {
            return Err(CpgaError::Contract(format!("similarity row {i} sums to {sum}")));
        }
    }
    let value = s.rows().into_iter().map(entropy).sum::<f64>() / n as f64;
    let grad = s.mapv(|x| -(x.max(f64::MIN_POSITIVE).ln() + 1.0) / n as f64);
    Ok(Loss { value, grad })
}

/// Neighborhood clustering for a batch of fresh features against the
/// feature bank. Row `i` of `q` is the current feature of bank entry
/// `indices[i]`; that entry is excluded from its own neighbor set. The
/// gradient is w.r.t. `q`; the bank is a constant.
pub fn neighborhood_clustering_on_bank(
    q: ArrayView2<f64>,
    indices: &[usize],
    bank: ArrayView2<f64>,
    tau: Temperature,
) -> Result<Loss> {
    let (n, nt) = (q.nrows(), bank.nrows());
    if nt < 2 {
        return Err(CpgaError::Contract("feature bank needs at least 2 entries".into()));
    }
    if indices.len() != n || q.ncols() != bank.ncols() {
        return Err(CpgaError::Shape("batch does not match feature bank".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= nt) {
        return Err(CpgaError::Contract(format!("bank index {bad} out of range")));
    }
    let t = tau.get();
    let (qn, qnorms) = linalg::l2_normalize_rows(q);
    let (bn, _) = linalg::l2_normalize_rows(bank);
    let mut z = qn.dot(&bn.t()) / t;
    for (i, &own) in indices.iter().enumerate() {
        z[[i, own]] = f64::NEG_INFINITY;
    }
    let s = linalg::softmax_rows(z.view(), 1.0);
    let mut total = 0.0;
    let mut dz = Array2::zeros(s.raw_dim());
    for (i, (srow, mut drow)) in s.rows().into_iter().zip(dz.rows_mut()).enumerate() {
        let h = entropy(srow);
        total += h;
        for (j, (&sj, d)) in srow.iter().zip(drow.iter_mut()).enumerate() {
            if j != indices[i] && sj > 0.0 {
                *d = -sj * (sj.ln() + h) / (t * n as f64);
            }
        }
    }
    let dqn = dz.dot(&bn);
    let grad = linalg::l2_normalize_backward(qn.view(), qnorms.view(), dqn.view());
    Ok(Loss {
        value: total / n as f64,
        grad,
    })
}
