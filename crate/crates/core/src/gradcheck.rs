//! Central finite-difference gradient verification.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::optim::ParamGroup;

/// One coordinate whose analytic and numeric gradients disagree beyond `tol`.
#[derive(Clone, Debug)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Denominator floor of the relative error: gradients smaller than this
/// are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the backward pass of `f` with central differences of step `eps`
/// on every coordinate of every parameter.
pub fn grad_check<F>(f: F, params: &ParamGroup, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamGroup) -> Result<Var>,
{
    let mut analytic_group = params.clone();
    analytic_group.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, &analytic_group)?;
    g.backward(loss, &mut analytic_group)?;

    let eval = |p: &ParamGroup| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, p)?;
        Ok(g.scalar(l))
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        failures: Vec::new(),
    };
    for id in params.ids() {
        let name = params.get(id).name.clone();
        let analytic = analytic_group.grad(id).map(|t| t.data().to_vec());
        for i in 0..params.value(id).numel() {
            let orig = params.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.as_ref().map_or(0.0, |v| v[i]);
            let rel = relative_error(a, numeric);
            report.checked += 1;
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
            }
            if !(rel <= tol) {
                report.failures.push(GradMismatch {
                    param: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(report)
}
