//! Central finite-difference checking of analytic gradients.

use super::array::Array;
use super::graph::{Gradients, Graph, Inputs, NodeId, ParamSet};
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest per-parameter relative error.
    pub max_rel_error: f64,
    /// `(parameter name, relative error)` in declaration order.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tol
    }
}

/// Numerical gradient of `f` at `params` by central differences.
pub fn finite_difference<F>(params: &ParamSet<f64>, eps: f64, mut f: F) -> Result<Gradients<f64>>
where
    F: FnMut(&ParamSet<f64>) -> Result<f64>,
{
    let mut probe = params.clone();
    let mut out = params.zeros_like();
    for id in params.ids() {
        for i in 0..params.get(id).len() {
            let x0 = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = x0 + eps;
            let plus = f(&probe);
            probe.get_mut(id).data_mut()[i] = x0 - eps;
            let minus = f(&probe);
            probe.get_mut(id).data_mut()[i] = x0;
            out.get_mut(id).data_mut()[i] = match (plus, minus) {
                (Ok(p), Ok(m)) => (p - m) / (2.0 * eps),
                _ => f64::NAN,
            };
        }
    }
    Ok(out)
}

/// Compares analytic gradients against central differences.
///
/// For every parameter array the error is
/// `‖analytic − numeric‖₂ / (‖analytic‖₂ + 1e-12)`; the report carries the
/// maximum over parameters. Non-finite differences count as infinite error.
pub fn grad_check<F>(params: &ParamSet<f64>, eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet<f64>) -> Result<(f64, Gradients<f64>)>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!(
            "finite-difference step {eps:e} outside [1e-6, 1e-3]"
        )));
    }
    let (_, analytic) = f(params)?;
    let numeric = finite_difference(params, eps, |p| f(p).map(|(v, _)| v))?;
    Ok(compare(params, &analytic, &numeric))
}

/// Relative error report between two gradient sets.
pub fn compare(
    params: &ParamSet<f64>,
    analytic: &Gradients<f64>,
    numeric: &Gradients<f64>,
) -> GradCheckReport {
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel = 0.0f64;
    for id in params.ids() {
        let a = analytic.get(id);
        let n = numeric.get(id);
        let rel = if n.all_finite() && a.all_finite() {
            let diff: f64 = a
                .data()
                .iter()
                .zip(n.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            diff / (a.norm2() + 1e-12)
        } else {
            f64::INFINITY
        };
        max_rel = max_rel.max(rel);
        per_param.push((params.name(id).to_string(), rel));
    }
    GradCheckReport {
        max_rel_error: max_rel,
        per_param,
    }
}

impl Graph<f64> {
    /// Gradient check of a scalar node of this graph.
    pub fn grad_check(
        &self,
        params: &ParamSet<f64>,
        inputs: &Inputs<'_, f64>,
        loss: NodeId,
        eps: f64,
    ) -> Result<GradCheckReport> {
        grad_check(params, eps, |p| {
            let v = self.forward(p, inputs)?;
            let g = self.backward(&v, loss, p)?;
            Ok((v.scalar(loss), g))
        })
    }
}

/// Convenience for one-off checks on scalar functions of one array.
pub fn check_array_fn<F>(x: &Array<f64>, eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    let mut params = ParamSet::new();
    let id = params.add("x", x.clone());
    let mut g = Graph::new();
    let xn = g.param(&params, id);
    let loss = build(&mut g, xn)?;
    g.grad_check(&params, &[], loss, eps)
}
