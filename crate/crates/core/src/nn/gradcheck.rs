//! Finite-difference gradient checking, independent of the tape.

use super::{Grads, ParamId, Params};

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: Vec<GradMismatch>,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Richardson-extrapolated central difference of `loss` along one scalar parameter.
pub fn numeric_partial<F>(params: &mut Params, id: ParamId, index: usize, step: f64, loss: &F) -> f64
where
    F: Fn(&Params) -> f64,
{
    let orig = params.get(id).data[index];
    let mut central = |h: f64| {
        params.get_mut(id).data[index] = orig + h;
        let up = loss(params);
        params.get_mut(id).data[index] = orig - h;
        let down = loss(params);
        params.get_mut(id).data[index] = orig;
        (up - down) / (2.0 * h)
    };
    let coarse = central(step);
    let fine = central(step / 2.0);
    (4.0 * fine - coarse) / 3.0
}

/// Compares `analytic` against finite differences for every scalar of every trainable
/// parameter accepted by `select`.
pub fn check<F, S>(
    params: &mut Params,
    analytic: &Grads,
    loss: F,
    select: S,
    step: f64,
    tolerance: f64,
    floor: f64,
) -> GradCheckReport
where
    F: Fn(&Params) -> f64,
    S: Fn(&str) -> bool,
{
    let mut report = GradCheckReport::default();
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let param = params.param(id);
        if !param.trainable || !select(&param.name) {
            continue;
        }
        let name = param.name.clone();
        for index in 0..params.get(id).data.len() {
            let numeric = numeric_partial(params, id, index, step, &loss);
            let a = analytic.get(id).map_or(0.0, |g| g[index]);
            let rel = relative_error(a, numeric, floor);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel >= tolerance {
                report.failures.push(GradMismatch {
                    param: name.clone(),
                    index,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    report
}
