//! Central finite-difference verification of analytic gradients.

/// Outcome of [`finite_difference_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares the analytic gradient returned by `f` at `point` with central
/// differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
///
/// The relative error of coordinate `i` is `|a_i - n_i| / max(|n_i|, floor)`
/// where `floor = 1e-3 * max_j |n_j|` (and at least 1e-10), so coordinates
/// whose true gradient is negligible are judged against the gradient scale
/// instead of against zero. A gradient scaled by 2 therefore reports 1.0.
pub fn finite_difference_check<F>(f: F, point: &[f64], step: f64, tolerance: f64) -> GradCheckReport
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(point);
    assert_eq!(analytic.len(), point.len(), "gradient length mismatch");
    let mut x = point.to_vec();
    let numeric: Vec<f64> = (0..point.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let plus = f(&x).0;
            x[i] = orig - step;
            let minus = f(&x).0;
            x[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect();
    let scale = numeric.iter().fold(0.0f64, |m, n| m.max(n.abs()));
    let floor = (1e-3 * scale).max(1e-10);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        tolerance,
    };
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / n.abs().max(floor);
        if err > report.max_relative_error || err.is_nan() {
            report.max_relative_error = err;
            report.worst_index = i;
        }
    }
    report
}
