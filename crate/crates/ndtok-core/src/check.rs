//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, TensorId};
use crate::math;
use crate::params::ParamStore;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error with denominator max(|analytic|, |numeric|, 1e-8).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = math::abs(analytic).max(math::abs(numeric)).max(1e-8);
    math::abs(analytic - numeric) / denom
}

/// Compares backward() gradients against central differences
/// (f(θ+h) − f(θ−h)) / 2h for every element of every named parameter.
/// Returns the maximum relative error observed.
///
/// `forward` must be deterministic and rebuild the graph from the store it is
/// given; it is invoked 1 + 2·(element count) times.
pub fn finite_diff_check<F>(store: &ParamStore, names: &[&str], h: f64, forward: F) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<(Graph, TensorId)>,
{
    let (mut graph, loss) = forward(store)?;
    graph.value(loss).scalar_value()?;
    let grads = graph.backward(loss)?;

    let mut max_rel: f64 = 0.0;
    for name in names {
        let base = store.get(name)?;
        let analytic = grads.param(name);
        for idx in 0..base.len() {
            let plus = store.perturbed(name, idx, h)?;
            let (gp, lp) = forward(&plus)?;
            let vp = gp.value(lp).scalar_value()?;

            let minus = store.perturbed(name, idx, -h)?;
            let (gm, lm) = forward(&minus)?;
            let vm = gm.value(lm).scalar_value()?;

            let numeric = (vp - vm) / (2.0 * h);
            // A parameter the loss never touches has zero analytic gradient.
            let a = analytic.map_or(0.0, |t| t.data()[idx]);
            max_rel = max_rel.max(relative_error(a, numeric));
        }
    }
    Ok(max_rel)
}
