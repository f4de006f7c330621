use serde::Serialize;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-4;

/// Central-difference gradient of `f` with respect to every scalar in `store`.
///
/// Parameters are restored exactly after each probe.
pub fn finite_diff_grad<F>(mut f: F, store: &mut ParamStore, eps: f64) -> Result<Vec<Tensor2>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let (grads, _) = finite_diff_grad_guarded(|s| f(s).map(|v| (v, ())), store, eps)?;
    Ok(grads)
}

/// Like [`finite_diff_grad`], but `f` also returns a signature of its discrete
/// choices. Coordinates whose ±eps probes change the signature sit on a
/// discontinuity; they get a NaN entry and are listed in the second return value.
pub fn finite_diff_grad_guarded<F, S>(
    mut f: F,
    store: &mut ParamStore,
    eps: f64,
) -> Result<(Vec<Tensor2>, Vec<(ParamId, usize)>)>
where
    F: FnMut(&ParamStore) -> Result<(f64, S)>,
    S: PartialEq,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!("eps must be positive, got {eps}")));
    }
    let (_, base_sig) = f(store)?;
    let mut out = Vec::with_capacity(store.len());
    let mut skipped = Vec::new();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let (r, c) = store.value(id).shape();
        let mut g = Tensor2::zeros(r, c);
        for k in 0..r * c {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + eps;
            let plus = f(store);
            store.value_mut(id).data_mut()[k] = orig - eps;
            let minus = f(store);
            store.value_mut(id).data_mut()[k] = orig;
            let (fp, sp) = plus?;
            let (fm, sm) = minus?;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective at {}[{k}] ± eps",
                    store.name(id)
                )));
            }
            if sp != base_sig || sm != base_sig {
                g.data_mut()[k] = f64::NAN;
                skipped.push((id, k));
            } else {
                g.data_mut()[k] = (fp - fm) / (2.0 * eps);
            }
        }
        out.push(g);
    }
    Ok((out, skipped))
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares analytic gradients (as accumulated in `store`) to `numeric`.
pub fn compare_gradients(store: &ParamStore, numeric: &[Tensor2], tol: f64) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    for (id, num) in store.ids().zip(numeric) {
        for (k, (&a, &n)) in store.grad(id).data().iter().zip(num.data()).enumerate() {
            if n.is_nan() {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            let e = relative_error(a, n);
            report.max_rel_err = report.max_rel_err.max(e);
            if !(e < tol) {
                report.failures.push(GradMismatch {
                    param: store.name(id).to_string(),
                    index: k,
                    analytic: a,
                    numeric: n,
                    rel_err: e,
                });
            }
        }
    }
    report
}
