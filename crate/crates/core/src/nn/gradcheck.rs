//! Central finite-difference comparison against tape gradients.

use super::graph::{Graph, Var};
use super::{ParamStore, Result, Tensor};

/// `max|a - n| / max(max|a|, max|n|)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Checks `d loss / d inputs[i]` for a loss built by `f` from leaf variables.
/// Returns one relative error per input.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&g, &vars)?;
    let grads = g.backward(loss)?;
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let g = Graph::inference();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&g, &vars)?;
        Ok(g.value(l).item())
    };
    let mut errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = vec![0.0; inputs[i].numel()];
        for j in 0..numeric.len() {
            let x0 = work[i].data[j];
            work[i].data[j] = x0 + h;
            let lp = eval(&work)?;
            work[i].data[j] = x0 - h;
            let lm = eval(&work)?;
            work[i].data[j] = x0;
            numeric[j] = (lp - lm) / (2.0 * h);
        }
        errors.push(relative_error(&analytic, &numeric));
    }
    Ok(errors)
}

/// Checks every parameter of `store` for a loss built by `f`; returns `(name, error)` pairs.
pub fn check_params<F>(store: &ParamStore, h: f64, f: F) -> Result<Vec<(String, f64)>>
where
    F: Fn(&Graph, &ParamStore) -> Result<Var>,
{
    let g = Graph::new();
    let loss = f(&g, store)?;
    let grads = g.backward(loss)?;
    let analytic = grads.for_store(store);
    let mut work = store.clone();
    let mut out = Vec::with_capacity(analytic.len());
    for (name, a) in analytic {
        let mut numeric = vec![0.0; a.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x0 = work.get(&name).expect("known parameter").data[j];
            let mut losses = [0.0; 2];
            for (k, x) in [x0 + h, x0 - h].into_iter().enumerate() {
                work.get_mut(&name).expect("known parameter").data[j] = x;
                let g = Graph::inference();
                let l = f(&g, &work)?;
                losses[k] = g.value(l).item();
            }
            work.get_mut(&name).expect("known parameter").data[j] = x0;
            let (lp, lm) = (losses[0], losses[1]);
            *slot = (lp - lm) / (2.0 * h);
        }
        out.push((name.clone(), relative_error(&a, &numeric)));
    }
    Ok(out)
}
