use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Grads, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Numeric and analytic values at the worst coordinate.
    pub worst_numeric: f64,
    pub worst_analytic: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub coordinates: usize,
    pub params: Vec<ParamCheck>,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares analytic gradients with central differences on up to
/// `per_param` sampled coordinates of every parameter.
///
/// `f` evaluates the scalar; `analytic` returns the scalar and its gradient.
/// Parameter values are restored before returning.
pub fn grad_check(
    store: &mut ParamStore,
    f: impl Fn(&ParamStore) -> Result<f64>,
    analytic: impl Fn(&ParamStore) -> Result<(f64, Grads)>,
    eps: f64,
    per_param: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Config(format!("grad_check eps {eps} outside [1e-7, 1e-4]")));
    }
    let (f0, grads) = analytic(store)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite(format!("objective = {f0}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        coordinates: 0,
        params: Vec::new(),
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let len = store.value(id).len();
        let coords: Vec<usize> = if len <= per_param {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, per_param).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst = 0.0f64;
        let mut worst_pair = (0.0, 0.0);
        for &c in &coords {
            let orig = store.value(id).data()[c];
            store.value_mut(id).data_mut()[c] = orig + eps;
            let plus = f(store);
            store.value_mut(id).data_mut()[c] = orig - eps;
            let minus = f(store);
            store.value_mut(id).data_mut()[c] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective while perturbing {}[{c}]",
                    store.name(id)
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let exact = grads.get(id).data()[c];
            let err = relative_error(numeric, exact);
            if err > worst || c == coords[0] {
                worst = worst.max(err);
                worst_pair = (numeric, exact);
            }
        }
        report.coordinates += coords.len();
        if worst > report.max_rel_error || report.worst_param.is_empty() {
            report.max_rel_error = report.max_rel_error.max(worst);
            report.worst_param = store.name(id).to_string();
        }
        report.params.push(ParamCheck {
            name: store.name(id).to_string(),
            checked: coords.len(),
            max_rel_error: worst,
            worst_numeric: worst_pair.0,
            worst_analytic: worst_pair.1,
        });
    }
    Ok(report)
}
