//! Central finite differences for checking reverse-mode gradients.

/// Default step for f64 central differences.
pub const STEP: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-8;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h`, restoring `x[i]` afterwards.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &mut [f64], i: usize, h: f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Worst relative error over every coordinate of `x`.
pub fn check_all(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    h: f64,
) -> f64 {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| relative_error(analytic[i], central_difference(f, &mut probe, i, h), REL_FLOOR))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let mut f = |x: &[f64]| x[0].powi(3);
        let mut x = [2.0];
        let d = central_difference(&mut f, &mut x, 0, STEP);
        assert!((d - 12.0).abs() < 1e-8);
        assert_eq!(x[0], 2.0);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, REL_FLOOR), 0.0);
        assert!(relative_error(1e-12, 2e-12, REL_FLOOR) < 1e-3);
        assert!((relative_error(1.0, 1.1, REL_FLOOR) - 0.1 / 1.1).abs() < 1e-15);
    }
}
