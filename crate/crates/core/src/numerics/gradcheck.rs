//! Central finite-difference gradient checks.

use super::graph::{Bound, Graph, Var};
use super::optim::ParamSet;
use crate::error::Result;

/// Relative error `|a - n| / max(|a|, |n|, floor)` between an analytic and a
/// numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Largest relative error between the recorded gradient of `f` and central
/// differences with step `h`, over every coordinate of every parameter.
///
/// `f` must build a scalar from the bound parameters using only the graph it
/// is given.
pub fn max_relative_error<F>(params: &ParamSet, h: f64, f: F) -> Result<f64>
where
    F: Fn(&Graph, &Bound) -> Result<Var>,
{
    let g = Graph::new();
    let bound = params.bind(&g, true)?;
    let loss = f(&g, &bound)?;
    let grads = g.backward(loss)?;

    let eval = |p: &ParamSet| -> Result<f64> {
        let g = Graph::new();
        let bound = p.bind(&g, false)?;
        let out = f(&g, &bound)?;
        Ok(g.scalar(out))
    };

    let mut worst: f64 = 0.0;
    for (name, t) in params.iter() {
        for i in 0..t.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            let mut tp = t.clone();
            tp.data_mut()[i] += h;
            plus.insert(name.clone(), tp);
            let mut tm = t.clone();
            tm.data_mut()[i] -= h;
            minus.insert(name.clone(), tm);
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            worst = worst.max(relative_error(grads[name].data()[i], numeric));
        }
    }
    Ok(worst)
}
