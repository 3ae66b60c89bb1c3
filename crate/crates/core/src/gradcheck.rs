//! Central finite-difference checking of analytic parameter gradients.

use crate::params::ParamRegistry;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: Option<String>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

impl Default for GradCheckReport {
    fn default() -> Self {
        Self {
            checked: 0,
            max_rel_error: 0.0,
            worst: None,
        }
    }
}

/// Error of an analytic derivative against a numeric one, measured on the
/// scale `max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compares `analytic` against central differences of `loss` for up to
/// `per_param` evenly spaced coordinates of every registry entry
/// (`per_param == 0` checks all of them).
pub fn check_params(
    params: &mut ParamRegistry<f64>,
    analytic: &ParamRegistry<f64>,
    eps: f64,
    per_param: usize,
    mut loss: impl FnMut(&ParamRegistry<f64>) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    for e in 0..params.len() {
        let id = crate::params::ParamId(e);
        let len = params.get(id).len();
        let count = if per_param == 0 { len } else { per_param.min(len) };
        for j in 0..count {
            let i = j * len / count;
            let orig = params.get(id)[i];
            params.get_mut(id)[i] = orig + eps;
            let up = loss(params);
            params.get_mut(id)[i] = orig - eps;
            let down = loss(params);
            params.get_mut(id)[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(analytic.get(id)[i], numeric);
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some(format!("{}[{i}]", params.entries()[e].name));
            }
        }
    }
    report
}

/// Same as [`check_params`] for a plain vector input.
pub fn check_vector(
    x: &mut [f64],
    analytic: &[f64],
    eps: f64,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let up = loss(x);
        x[i] = orig - eps;
        let down = loss(x);
        x[i] = orig;
        let err = relative_error(analytic[i], (up - down) / (2.0 * eps));
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(format!("x[{i}]"));
        }
    }
    report
}
