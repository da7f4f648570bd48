//! Central finite-difference gradient checking.

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// `max_i |analytic_i - numeric_i| / max(|analytic|_inf, |numeric|_inf)`
    /// over the checked coordinates.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub passed: bool,
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} coords checked, max rel err {:.3e} (abs {:.3e} at index {}): {}",
            self.checked,
            self.max_rel_err,
            self.max_abs_err,
            self.worst_index,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Checks every coordinate of `point`. `loss_fn` returns `(value, gradient)`.
pub fn gradcheck<F>(loss_fn: F, point: &[f64], rel_tol: f64) -> GradReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let all: Vec<usize> = (0..point.len()).collect();
    gradcheck_indices(loss_fn, point, &all, FD_STEP, rel_tol)
}

/// Checks only the listed coordinates with step `h`.
pub fn gradcheck_indices<F>(mut loss_fn: F, point: &[f64], indices: &[usize], h: f64, rel_tol: f64) -> GradReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss_fn(point);
    let mut x = point.to_vec();
    let mut numeric = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = x[i];
        x[i] = orig + h;
        let (up, _) = loss_fn(&x);
        x[i] = orig - h;
        let (down, _) = loss_fn(&x);
        x[i] = orig;
        numeric.push((up - down) / (2.0 * h));
    }
    let scale = indices
        .iter()
        .map(|&i| analytic[i].abs())
        .chain(numeric.iter().map(|v| v.abs()))
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut worst = (0.0, indices.first().copied().unwrap_or(0));
    for (&i, n) in indices.iter().zip(&numeric) {
        let e = (analytic[i] - n).abs();
        if e > worst.0 || e.is_nan() {
            worst = (e, i);
        }
    }
    let max_rel_err = worst.0 / scale;
    GradReport {
        max_rel_err,
        max_abs_err: worst.0,
        worst_index: worst.1,
        checked: indices.len(),
        passed: max_rel_err < rel_tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_on_quadratic() {
        let r = gradcheck(
            |x| (x.iter().map(|v| v * v).sum(), x.iter().map(|v| 2.0 * v).collect()),
            &[0.3, -1.2, 2.0],
            1e-9,
        );
        assert!(r.passed, "{r}");
    }

    #[test]
    fn catches_a_wrong_gradient() {
        let r = gradcheck(|x| (x[0] * x[0], vec![x[0]]), &[1.0], 1e-3);
        assert!(!r.passed);
        assert!((r.max_rel_err - 0.5).abs() < 1e-6);
    }
}
