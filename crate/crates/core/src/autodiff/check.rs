//! Central-finite-difference gradient checking.
//!
//! The numerical side never touches the tape: it re-runs a caller-supplied
//! forward closure at perturbed parameter values, so it stays an independent
//! oracle for whatever the reverse sweep produced.

use super::tensor::Param;
use crate::error::Result;

/// Probe step for central differences.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Tensor name and flat component index of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub components: usize,
}

/// Scaled relative error: plain relative error for O(1) gradients, absolute
/// near zero where finite differences bottom out at roundoff.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1.0, f64::max(a.abs(), b.abs()))
}

/// Compare analytic gradients (already accumulated in each parameter's grad
/// buffer) against central finite differences of `forward_loss`.
///
/// `forward_loss` must re-read current parameter values on every call and
/// must not mutate them.
pub fn check_gradients(
    params: &[(String, Param)],
    mut forward_loss: impl FnMut() -> Result<f64>,
    step: f64,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        components: 0,
    };
    for (name, p) in params {
        let analytic = p.grad_vec();
        let n = p.numel();
        for i in 0..n {
            let orig = p.borrow().data()[i];
            p.borrow_mut().data_mut()[i] = orig + step;
            let up = forward_loss()?;
            p.borrow_mut().data_mut()[i] = orig - step;
            let down = forward_loss()?;
            p.borrow_mut().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let e = rel_err(analytic[i], numeric);
            report.components += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
