use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared on an absolute scale.
const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the coordinate with the largest relative error.
    pub worst_index: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compares the tape gradient of `f` at `x` against central differences on
/// every coordinate.
pub fn check_gradients<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    check_gradients_at(f, x, &all, eps, tol)
}

/// Like [`check_gradients`] but only probes the listed coordinates.
///
/// Relative error per coordinate is `|analytic − numeric| / max(|analytic|,
/// |numeric|, 1e-3)`; the check passes iff the maximum is `≤ tol`.
pub fn check_gradients_at<F>(f: F, x: &Tensor, coords: &[usize], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::config("gradient check step must be positive"));
    }
    let eval = |data: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.variable(x.shape(), data.to_vec())?;
        let out = f(&mut tape, v)?;
        if tape.value(out).len() != 1 {
            return Err(Error::contract("gradient check function must return a scalar"));
        }
        Ok(tape.scalar_value(out))
    };

    let mut tape = Tape::new();
    let v = tape.variable(x.shape(), x.data().to_vec())?;
    let out = f(&mut tape, v)?;
    let analytic = tape.backward(out)?.get_or_zeros(&tape, v);

    let mut probe = x.data().to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        tol,
        passed: true,
    };
    for &i in coords {
        if i >= probe.len() {
            return Err(Error::dim("check_gradients", "coordinate", probe.len(), i));
        }
        let orig = probe[i];
        probe[i] = orig + eps;
        let fp = eval(&probe)?;
        probe[i] = orig - eps;
        let fm = eval(&probe)?;
        probe[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let abs = (analytic[i] - numeric).abs();
        let rel = abs / analytic[i].abs().max(numeric.abs()).max(REL_FLOOR);
        if !rel.is_finite() || rel > report.max_rel_error {
            report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
            report.worst_index = i;
        }
        report.max_abs_error = report.max_abs_error.max(abs);
        report.checked += 1;
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
