//! Central-difference gradient verification.

use super::graph::{Graph, Var};
use super::value::Tensor;
use crate::error::{Error, Result};

/// Relative error used throughout: `|analytic − numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Compare the analytic gradient of a scalar function of `x` against central
/// differences with step `h`, returning the largest relative error over all
/// coordinates.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let errors = grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h)?;
    Ok(errors[0])
}

/// Gradient check over several inputs at once; returns one max relative
/// error per input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_value(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut errors = Vec::with_capacity(inputs.len());
    for (k, grad) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..work[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
        errors.push(worst);
    }
    Ok(errors)
}

pub(crate) fn scalar_value(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if !t.is_scalar() {
        return Err(Error::Graph(format!(
            "expected scalar output, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}
