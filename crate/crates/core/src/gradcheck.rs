//! Central finite differences for verifying hand-written gradients.

/// Step used by the gradient verification suite.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Numerical gradient of `f` at `x` by central differences.
pub fn central_differences<F>(f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let plus = f(&probe);
            probe[i] = orig - step;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm. Two vanishing
/// gradients (both norms below 1e-10) compare as equal.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub relative_error: f64,
    pub analytic_norm: f64,
}

/// Compares `analytic` against central differences of `f` at `x`.
pub fn check<F>(f: F, x: &[f64], analytic: &[f64], step: f64) -> GradCheck
where
    F: Fn(&[f64]) -> f64,
{
    let numeric = central_differences(f, x, step);
    GradCheck {
        relative_error: relative_error(analytic, &numeric),
        analytic_norm: analytic.iter().map(|a| a * a).sum::<f64>().sqrt(),
    }
}
