//! Central finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::{ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
}

/// Gradients below this magnitude are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-8;

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compare autodiff gradients of `f` against the fourth-order central
/// difference `(8(f(p+h) - f(p-h)) - (f(p+2h) - f(p-2h))) / 12h` for every
/// scalar of every trainable parameter in `store`. `f` must build the
/// same deterministic computation each time it is called.
pub fn finite_diff_check<F>(store: &mut ParamStore, h: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.get(id).requires_grad()).collect();
    let analytic: Vec<Vec<f64>> = {
        let mut tmp = store.clone();
        tmp.zero_grad();
        grads.write_to(&mut tmp)?;
        ids.iter()
            .map(|&id| {
                tmp.get(id)
                    .grad()
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tmp.get(id).len()])
            })
            .collect()
    };

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let v = f(&mut g, store)?;
        Ok(g.scalar(v))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates: 0,
    };
    for (pi, &id) in ids.iter().enumerate() {
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            let mut at = |store: &mut ParamStore, d: f64| {
                store.get_mut(id).data_mut()[j] = orig + d;
                eval(store)
            };
            let (f1p, f1m) = (at(store, h)?, at(store, -h)?);
            let (f2p, f2m) = (at(store, 2.0 * h)?, at(store, -2.0 * h)?);
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (8.0 * (f1p - f1m) - (f2p - f2m)) / (12.0 * h);
            let a = analytic[pi][j];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                if err >= report.max_rel_error {
                    report.worst = Some((store.name(id).to_string(), j));
                    report.analytic_at_worst = a;
                    report.numeric_at_worst = numeric;
                }
            }
        }
    }
    Ok(report)
}
