//! Central finite-difference gradient checker.

use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    /// max_i |g_analytic − g_fd| / max(1e-12, |g_fd|)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-12)
}

/// Compare the analytic gradient returned by `f` at `point` with central
/// differences of step `h` in every coordinate.
pub fn finite_diff_check<F>(f: F, point: &[f64], h: f64) -> GradCheckReport
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let (_, analytic) = f(point);
    assert_eq!(analytic.len(), point.len(), "gradient length must match the point");
    let mut x = point.to_vec();
    let mut numeric = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x).0;
        x[i] = orig - h;
        let fm = f(&x).0;
        x[i] = orig;
        numeric.push((fp - fm) / (2.0 * h));
    }
    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    GradCheckReport { max_rel_error, worst_index, analytic, numeric }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let r = finite_diff_check(|x| (x.iter().map(|v| v * v).sum(), x.iter().map(|v| 2.0 * v).collect()), &[0.7], 1e-5);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn constant() {
        let r = finite_diff_check(|x| (3.0, vec![0.0; x.len()]), &[1.0, -2.0, 5.0], 1e-5);
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn detects_wrong_gradient() {
        let r = finite_diff_check(|x| (x[0] * x[0], vec![x[0]]), &[1.0], 1e-5);
        assert!(r.max_rel_error > 0.4);
    }
}
