//! Central finite-difference check of reverse-mode gradients.

use super::{forward_backward, Graph, ParamStore, Var};
use crate::error::Result;

/// Denominator floor for the relative error, so entries where both
/// gradients vanish are judged by absolute error.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter name, flat index)` of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares every parameter entry's reverse-mode gradient with
/// `(f(p + h) - f(p - h)) / 2h`. The store is restored before returning.
pub fn gradient_check<F>(params: &mut ParamStore, step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let (_, grads) = forward_backward(params, &build)?;
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(p);
        let loss = build(&mut g)?;
        Ok(g.value(loss).data()[0])
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for j in 0..params.get(id).len() {
            let orig = params.get(id).data()[j];
            params.get_mut(id).data_mut()[j] = orig + step;
            let plus = eval(params);
            params.get_mut(id).data_mut()[j] = orig - step;
            let minus = eval(params);
            params.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * step);
            let err = relative_error(grads.get(id).data()[j], numeric);
            report.entries_checked += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((params.name(id).to_string(), j));
            }
        }
    }
    Ok(report)
}
