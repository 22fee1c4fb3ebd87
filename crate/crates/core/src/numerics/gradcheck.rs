//! Gradient evaluation entry points and the central-difference oracle.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Evaluates a scalar function of `params` and its reverse-mode gradients.
///
/// Parameters that do not reach the output get exact zero gradients.
pub fn evaluate_with_gradients<F>(f: F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let graph = Graph::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| graph.param(p.clone())).collect();
    let out = f(&graph, &vars)?;
    let value = out.with_value(|v| {
        if v.len() == 1 {
            Ok(v.item())
        } else {
            Err(Error::ShapeMismatch {
                op: "evaluate_with_gradients",
                lhs: v.shape().to_vec(),
                rhs: vec![],
            })
        }
    })?;
    let mut grads = graph.backward(out)?;
    Ok((value, vars.iter().map(|v| grads.take(*v)).collect()))
}

fn eval_value<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let graph = Graph::no_grad();
    let vars: Vec<Var<'_>> = params.iter().map(|p| graph.constant(p.clone())).collect();
    let out = f(&graph, &vars)?;
    Ok(out.with_value(|v| v.item()))
}

/// Central differences `(f(p + εe_i) - f(p - εe_i)) / 2ε` for every coordinate
/// of every parameter. Only forward values are used.
pub fn finite_difference_gradients<F>(f: F, params: &[Tensor], step: f64) -> Result<Vec<Tensor>>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    let mut flat = 0usize;
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].shape());
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let up = eval_value(&f, &work)?;
            work[p].data_mut()[i] = orig - step;
            let down = eval_value(&f, &work)?;
            work[p].data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite {
                    what: "finite-difference evaluation",
                    index: flat + i,
                });
            }
            g.data_mut()[i] = (up - down) / (2.0 * step);
        }
        flat += params[p].len();
        out.push(g);
    }
    Ok(out)
}

/// Norm-wise relative error between two gradient lists:
/// `‖a - b‖₂ / max(‖a‖₂, ‖b‖₂, floor)` over all coordinates.
pub fn relative_error(a: &[Tensor], b: &[Tensor], floor: f64) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (ta, tb) in a.iter().zip(b) {
        for (x, y) in ta.data().iter().zip(tb.data()) {
            diff += (x - y) * (x - y);
            na += x * x;
            nb += y * y;
        }
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(floor)
}
