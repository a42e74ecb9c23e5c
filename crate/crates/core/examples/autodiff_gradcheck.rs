//! Builds a small graph by hand and checks its gradient against central
//! differences.

use fpo_lab::autodiff::{grad_check, Array, Graph, ParamSet};

fn main() -> fpo_lab::Result<()> {
    let mut params = ParamSet::new();
    let w = params.add("w", Array::matrix(3, 4, (0..12).map(|i| (i as f64 - 5.5) / 7.0).collect())?);
    let x = Array::matrix(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75])?;

    let report = grad_check(&params, 1e-5, |p| {
        let mut g = Graph::new();
        let (wn, xn) = (g.param(p, w), g.constant(x.clone()));
        let logits = g.matmul(xn, wn)?;
        let lsm = g.log_softmax(logits)?;
        let loss = g.mean(lsm)?;
        let v = g.forward(p, &[])?;
        let grads = g.backward(&v, loss, p)?;
        Ok((v.scalar(loss), grads))
    })?;
    println!("max relative error {:.3e}", report.max_rel_error);
    for (name, err) in &report.per_param {
        println!("  {name}: {err:.3e}");
    }
    Ok(())
}
