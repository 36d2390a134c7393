//! Central-difference verification of [`Graph::backward`].

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Floor on the relative-error denominator.
pub const DENOM_FLOOR: f64 = 1e-8;

/// Worst disagreement found by [`grad_check_many`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor], differentiable: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            if differentiable {
                graph.param(t.clone())
            } else {
                graph.constant(t.clone())
            }
        })
        .collect();
    let out = f(&mut graph, &vars).map_err(|e| TensorError::Evaluation(format!("function evaluation failed: {e}")))?;
    let value = graph.value(out);
    if !value.is_scalar() {
        return Err(TensorError::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    if !value.item().is_finite() {
        return Err(TensorError::Evaluation("function value is not finite".into()));
    }
    Ok((graph, vars, out))
}

/// Compare `backward` against central differences for every element of every
/// input (or only the elements selected by `select`, given as `(input, element)`).
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], step: f64, select: Option<&dyn Fn(usize, usize) -> bool>) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(TensorError::Contract(format!("step {step} outside [1e-7, 1e-3]")));
    }
    let (graph, vars, out) = eval_scalar(&f, inputs, true)?;
    let grads = graph.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .ok_or_else(|| TensorError::Contract("missing gradient for input".into()))?
            .clone();
        for elem in 0..inputs[which].numel() {
            if let Some(sel) = select {
                if !sel(which, elem) {
                    continue;
                }
            }
            let original = inputs[which].data()[elem];
            probe[which].data_mut()[elem] = original + step;
            let plus = eval_scalar(&f, &probe, false)?;
            let f_plus = plus.0.value(plus.2).item();
            probe[which].data_mut()[elem] = original - step;
            let minus = eval_scalar(&f, &probe, false)?;
            let f_minus = minus.0.value(minus.2).item();
            probe[which].data_mut()[elem] = original;

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let ana = analytic.data()[elem];
            let rel = (ana - numeric).abs() / numeric.abs().max(DENOM_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((which, elem));
                report.analytic = ana;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Worst relative error between `backward` and central differences of `f` at `x`.
///
/// The relative error of each element is `|analytic - numeric| / max(|numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let report = grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), step, None)?;
    Ok(report.max_rel_error)
}
