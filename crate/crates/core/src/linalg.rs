//! Row-wise numeric helpers shared by the models and losses.
//!
//! Every helper that participates in training has a matching `*_backward`
//! that maps an upstream gradient back onto its input.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

/// Rows with a norm below this are nudged along the first axis before
/// normalizing, so normalization never divides by zero.
pub const NORM_EPS: f64 = 1e-12;

/// Numerically stable softmax of `scale * x` along each row.
pub fn softmax_rows(x: ArrayView2<f64>, scale: f64) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
        row.mapv_inplace(|v| (v * scale - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Gradient of a row softmax w.r.t. its (unscaled) logits, given the
/// softmax output `p` and upstream gradient `dp`.
pub fn softmax_backward(p: ArrayView2<f64>, dp: ArrayView2<f64>, scale: f64) -> Array2<f64> {
    let mut out = Array2::zeros(p.raw_dim());
    Zip::from(out.rows_mut())
        .and(p.rows())
        .and(dp.rows())
        .for_each(|mut o, p, dp| {
            let inner = p.dot(&dp);
            Zip::from(&mut o)
                .and(&p)
                .and(&dp)
                .for_each(|o, &pi, &gi| *o = scale * pi * (gi - inner));
        });
    out
}

/// L2-normalizes each row. Returns the normalized rows and the norms used
/// (after any zero-row perturbation).
pub fn l2_normalize_rows(x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let mut out = x.to_owned();
    let mut norms = Array1::zeros(x.nrows());
    for (mut row, n) in out.rows_mut().into_iter().zip(norms.iter_mut()) {
        let mut norm = row.dot(&row).sqrt();
        if norm < NORM_EPS {
            row[0] += NORM_EPS;
            norm = row.dot(&row).sqrt();
        }
        row /= norm;
        *n = norm;
    }
    (out, norms)
}

/// Backward of [`l2_normalize_rows`]: `dx = (du - (du.u) u) / |x|`.
pub fn l2_normalize_backward(
    u: ArrayView2<f64>,
    norms: ArrayView1<f64>,
    du: ArrayView2<f64>,
) -> Array2<f64> {
    let mut dx = du.to_owned();
    Zip::from(dx.rows_mut())
        .and(u.rows())
        .and(norms)
        .for_each(|mut g, u, &n| {
            let proj = g.dot(&u);
            g.scaled_add(-proj, &u);
            g /= n;
        });
    dx
}

pub fn l2_norm(x: ArrayView1<f64>) -> f64 {
    x.dot(&x).sqrt()
}

/// Cosine similarity of two vectors; zero vectors are perturbed like in
/// [`l2_normalize_rows`].
pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = l2_norm(a).max(NORM_EPS);
    let nb = l2_norm(b).max(NORM_EPS);
    a.dot(&b) / (na * nb)
}

/// Cosine similarity between every row of `a` and every row of `b`.
pub fn cosine_matrix(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (an, _) = l2_normalize_rows(a);
    let (bn, _) = l2_normalize_rows(b);
    an.dot(&bn.t())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

pub fn argmax_rows(m: ArrayView2<f64>) -> Vec<usize> {
    m.rows().into_iter().map(argmax).collect()
}

/// Gathers the given rows into a new matrix.
pub fn select_rows(m: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    m.select(Axis(0), idx)
}

pub fn all_finite(m: ArrayView2<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}
