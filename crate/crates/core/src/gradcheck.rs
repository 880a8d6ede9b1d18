//! Central finite-difference verification of [`Graph::backward`].
//!
//! The reported error is the largest per-coordinate deviation between the
//! analytic and numeric gradient, divided by the largest gradient magnitude
//! of either (floored at `1e-12`). Normalizing by the whole gradient rather
//! than per coordinate keeps coordinates whose true derivative is zero from
//! dominating the metric with rounding noise.

use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::param::ParamStore;
use crate::Tensor;

/// Compares two gradient vectors with the normalization described above.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(1e-12f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

/// Checks the gradient of the scalar `f(x)` with central differences of width `step`.
pub fn finite_diff_check<G>(mut f: G, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    G: FnMut(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let loss = f(&mut g, xv)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<f64> = match grads.get(xv) {
        Some(d) => d.to_vec(),
        None => alloc::vec![0.0; x.len()],
    };

    let mut eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * step));
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Checks the gradient of a scalar function of every trainable parameter in `store`.
pub fn finite_diff_check_params<G>(mut f: G, store: &mut ParamStore<f64>, step: f64) -> Result<f64>
where
    G: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    store.zero_grad();
    store.accumulate(&grads);

    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.requires_grad)
        .map(|(id, _)| id)
        .collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for id in ids {
        let n = store.get(id).value.len();
        for i in 0..n {
            analytic.push(store.get(id).grad.data()[i]);
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + step;
            let mut g = Graph::new();
            let out = f(&mut g, store)?;
            let fp = g.value(out).item();
            store.get_mut(id).value.data_mut()[i] = orig - step;
            let mut g = Graph::new();
            let out = f(&mut g, store)?;
            let fm = g.value(out).item();
            store.get_mut(id).value.data_mut()[i] = orig;
            numeric.push((fp - fm) / (2.0 * step));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}
