//! Central finite-difference verification of [`Graph::backward`].

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    /// Name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Denominator floor for the relative error, so that coordinates whose
/// true gradient is zero are judged by absolute error.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Compares analytic gradients of the scalar built by `f` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h`, one coordinate at a time.
///
/// Existing gradients in `store` are cleared before and after the check.
pub fn finite_diff_check<F>(store: &mut ParamStore, step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    if !(step > 0.0) {
        return invalid(format!("finite_diff_check: step must be positive, got {step}"));
    }
    store.zero_grad();
    let mut graph = Graph::new();
    let root = f(store, &mut graph)?;
    graph.backward(root, store)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.data().to_vec()).collect();
    store.zero_grad();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let r = f(store, &mut g)?;
        Ok(g.scalar(r))
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for (pi, name) in names.iter().enumerate() {
        let id = store.id(name).expect("name taken from the store");
        for j in 0..analytic[pi].len() {
            let orig = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + step;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = orig - step;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi][j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            report.coordinates += 1;
            report.max_absolute_error = report.max_absolute_error.max(abs);
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(rel);
                report.worst = Some((name.clone(), j));
            }
        }
    }
    Ok(report)
}
