//! Central finite-difference checks for reverse-mode gradients.
//!
//! The numeric side only evaluates forward values, so it stays independent of
//! the adjoint rules it is checking. Errors are reported as
//! `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, 1e-12)`.

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Central differences of a scalar function at `x`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Checks the adjoints of every input of a graph-built scalar function.
///
/// `build` receives the graph and one constant node per input tensor and must
/// return a scalar node. Returns the worst relative error over the inputs.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let (g, vars, out) = eval(inputs)?;
    let grads = g.gradients(out)?;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let numeric = numeric_gradient(
            |x| {
                let mut ts = inputs.to_vec();
                ts[k] = Tensor::new(input.shape().to_vec(), x.to_vec()).expect("same shape");
                let (g, _, out) = eval(&ts).expect("forward succeeded at the base point");
                g.value(out).item()
            },
            input.data(),
            h,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Checks parameter adjoints accumulated by [`Graph::backward`].
///
/// `build` must construct the scalar loss from the current store values.
/// Existing gradients in `store` are cleared. Returns the relative error over
/// the concatenation of all requested parameters.
pub fn check_params<F>(store: &mut ParamStore, ids: &[ParamId], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let out = build(&mut g, store)?;
    g.backward(out, store)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for &id in ids {
        analytic.extend_from_slice(store.grad(id).data());
        let base = store.value(id).data().to_vec();
        for (i, &b) in base.iter().enumerate() {
            let at = |v: f64, store: &mut ParamStore| -> Result<f64> {
                store.value_mut(id).data_mut()[i] = v;
                let mut g = Graph::new();
                let out = build(&mut g, store)?;
                Ok(g.value(out).item())
            };
            let up = at(b + h, store)?;
            let down = at(b - h, store)?;
            store.value_mut(id).data_mut()[i] = b;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    store.zero_grads();
    Ok(relative_error(&analytic, &numeric))
}
