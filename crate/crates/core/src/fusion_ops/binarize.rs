/// `sign(t)` with `sign(0) = +1`.
pub fn binarize(t: &[f64]) -> Vec<f64> {
    t.iter().map(|&v| if v >= 0.0 { 1.0 } else { -1.0 }).collect()
}

/// Straight-through estimator: the upstream gradient passes where
/// `|t| <= 1` and is zeroed elsewhere.
pub fn binarize_backward(t: &[f64], grad: &[f64]) -> Vec<f64> {
    t.iter()
        .zip(grad)
        .map(|(&v, &g)| if v.abs() <= 1.0 { g } else { 0.0 })
        .collect()
}
