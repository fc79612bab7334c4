//! Central finite-difference verification of analytic gradients.

use serde::{Deserialize, Serialize};

use super::params::ParamSet;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-6;

/// Entries checked per parameter matrix.
const MAX_ENTRIES: usize = 48;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<String>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    fn new(tolerance: f64) -> Self {
        GradCheckReport { max_rel_err: 0.0, checked: 0, worst: None, tolerance, passed: true }
    }

    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err || err.is_nan() {
            self.max_rel_err = err;
            self.worst = Some(format!("{} (analytic {analytic:.6e}, numeric {numeric:.6e})", label()));
        }
        self.passed = self.max_rel_err <= self.tolerance;
    }

    pub fn merge(mut self, other: GradCheckReport) -> GradCheckReport {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err || other.max_rel_err.is_nan() {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.tolerance = self.tolerance.min(other.tolerance);
        self.passed = self.passed && other.passed && self.max_rel_err <= self.tolerance;
        self
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against central differences of `f` around `values`.
pub fn check_values(values: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64, h: f64, tol: f64) -> GradCheckReport {
    assert_eq!(values.len(), analytic.len(), "gradient length");
    let mut report = GradCheckReport::new(tol);
    let mut probe = values.to_vec();
    for i in 0..values.len() {
        probe[i] = values[i] + h;
        let plus = f(&probe);
        probe[i] = values[i] - h;
        let minus = f(&probe);
        probe[i] = values[i];
        report.record(|| format!("input[{i}]"), analytic[i], (plus - minus) / (2.0 * h));
    }
    report
}

/// Checks the gradients accumulated in `ps` for the named parameters against
/// central differences of `loss`. Large matrices are subsampled: entries with
/// nonzero gradient first, then a stride over the rest.
pub fn check_params(ps: &ParamSet, loss: &dyn Fn(&ParamSet) -> f64, names: &[String], h: f64, tol: f64) -> GradCheckReport {
    let mut report = GradCheckReport::new(tol);
    let mut scratch = ps.clone();
    for name in names {
        let grad = ps.grad(name).as_slice().to_vec();
        for idx in pick_entries(&grad) {
            let orig = ps.value(name).as_slice()[idx];
            scratch.value_mut(name).as_mut_slice()[idx] = orig + h;
            let plus = loss(&scratch);
            scratch.value_mut(name).as_mut_slice()[idx] = orig - h;
            let minus = loss(&scratch);
            scratch.value_mut(name).as_mut_slice()[idx] = orig;
            report.record(|| format!("{name}[{idx}]"), grad[idx], (plus - minus) / (2.0 * h));
        }
    }
    report
}

fn pick_entries(grad: &[f64]) -> Vec<usize> {
    if grad.len() <= MAX_ENTRIES {
        return (0..grad.len()).collect();
    }
    let nonzero: Vec<usize> = (0..grad.len()).filter(|&i| grad[i] != 0.0).collect();
    let mut picked: Vec<usize> = if nonzero.len() <= MAX_ENTRIES * 3 / 4 {
        nonzero
    } else {
        let step = nonzero.len() as f64 / (MAX_ENTRIES * 3 / 4) as f64;
        (0..MAX_ENTRIES * 3 / 4).map(|k| nonzero[(k as f64 * step) as usize]).collect()
    };
    let stride = grad.len() / (MAX_ENTRIES / 4);
    picked.extend((0..MAX_ENTRIES / 4).map(|k| k * stride + stride / 2));
    picked.sort_unstable();
    picked.dedup();
    picked
}
