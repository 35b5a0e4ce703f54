//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward loss, so it stays
//! independent of the tape's backward closures.

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Relative error with a floor on the denominator so that two gradients that
/// both vanish compare as equal.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Worst disagreement found for one parameter.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Central differences of `loss` w.r.t. every element of parameter `id`.
pub fn numeric_gradient<F>(store: &mut ParamStore, id: ParamId, step: f64, loss: &mut F) -> Result<Tensor>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let n = store.get(id).value().len();
    let mut out = Tensor::zeros(store.get(id).value().shape());
    for i in 0..n {
        let orig = store.get(id).value().data()[i];
        store.get_mut(id).value_mut().data_mut()[i] = orig + step;
        let plus = loss(store)?;
        store.get_mut(id).value_mut().data_mut()[i] = orig - step;
        let minus = loss(store)?;
        store.get_mut(id).value_mut().data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(out)
}

/// Compares the analytic gradients already accumulated in `store` against
/// central differences of `loss`, one report per parameter.
pub fn compare_all<F>(
    store: &mut ParamStore,
    step: f64,
    floor: f64,
    mut loss: F,
) -> Result<Vec<GradReport>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let mut reports = Vec::with_capacity(ids.len());
    for id in ids {
        let analytic = store.get(id).gradient().clone();
        let numeric = numeric_gradient(store, id, step, &mut loss)?;
        let mut report = GradReport {
            name: store.get(id).name().to_string(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
            let e = relative_error(a, n, floor);
            if e > report.max_rel_error {
                report = GradReport {
                    max_rel_error: e,
                    worst_index: i,
                    analytic: a,
                    numeric: n,
                    ..report
                };
            }
        }
        reports.push(report);
    }
    Ok(reports)
}
