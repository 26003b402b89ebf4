//! Central finite-difference gradient oracle.
//!
//! Independent of the reverse sweep: it only evaluates the loss closure.

use super::array::{Grads, ParamStore};

/// Central differences `(f(θ+h) - f(θ-h)) / 2h` for every scalar parameter.
pub fn numeric_gradient(
    store: &ParamStore,
    step: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> Vec<Vec<f64>> {
    let mut work = store.clone();
    let mut out = Vec::with_capacity(store.len());
    for id in store.ids() {
        let mut g = vec![0.0; store.get(id).len()];
        for (k, slot) in g.iter_mut().enumerate() {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + step;
            let up = loss(&work);
            work.get_mut(id).data_mut()[k] = orig - step;
            let down = loss(&work);
            work.get_mut(id).data_mut()[k] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// Largest relative discrepancy `|a - n| / max(|a|, |n|)` over all entries.
/// Pairs where both magnitudes fall below `1e-7` are compared absolutely.
pub fn max_relative_error(store: &ParamStore, analytic: &Grads, numeric: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for id in store.ids() {
        let a = analytic.value_or_zero(id, store);
        for (x, y) in a.iter().zip(&numeric[id.index()]) {
            let scale = x.abs().max(y.abs());
            let err = if scale < 1e-7 {
                (x - y).abs()
            } else {
                (x - y).abs() / scale
            };
            worst = worst.max(err);
        }
    }
    worst
}
