//! Central finite-difference verification of analytic gradients (64-bit only).

/// Elementwise relative error `|a - n| / max(|a|, |n|, 1e-7)`; the floor
/// keeps exact-zero gradients from dividing by zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-7);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` against `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// coordinate and returns the largest relative error.
pub fn finite_difference_check(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    h: f64,
) -> f64 {
    assert_eq!(x.len(), analytic.len(), "gradient length differs from input length");
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_on_quadratic() {
        let x = [1.0, -2.0, 0.5];
        let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let err = finite_difference_check(|v| v.iter().map(|a| a * a).sum(), &x, &g, 1e-4);
        assert!(err < 1e-10);
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = [1.0, 2.0];
        let err = finite_difference_check(|v| v[0] * v[1], &x, &[2.0, 2.0], 1e-5);
        assert!(err > 0.4);
    }
}
