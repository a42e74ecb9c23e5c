use fpo_lab::autodiff::{grad_check, Array, Graph, NodeId, ParamSet};
use fpo_lab::Result;
use proptest::prelude::*;

const TOL: f64 = 1e-6;

fn mat(rows: usize, cols: usize, seed: u64) -> Array<f64> {
    // deterministic values in (-1.5, 1.5), kept away from zero so relu has no kink nearby
    let data = (0..rows * cols)
        .map(|i| {
            let t = ((i as u64 + 1) * 2654435761 + seed * 97) % 1000;
            let v = t as f64 / 1000.0 * 3.0 - 1.5;
            if v.abs() < 0.1 {
                v + 0.3
            } else {
                v
            }
        })
        .collect();
    Array::matrix(rows, cols, data).unwrap()
}

fn vector(n: usize, seed: u64) -> Array<f64> {
    mat(1, n, seed).reshape(&[n]).unwrap()
}

/// Runs a gradient check on `build(a, b, c)` reduced to a scalar through a
/// fixed random projection so every output element matters.
fn check<F>(a: Array<f64>, b: Array<f64>, c: Array<f64>, build: F) -> f64
where
    F: Fn(&mut Graph<f64>, NodeId, NodeId, NodeId) -> Result<NodeId>,
{
    let mut params = ParamSet::new();
    let ia = params.add("a", a);
    let ib = params.add("b", b);
    let ic = params.add("c", c);
    let report = grad_check(&params, 1e-5, |p| {
        let mut g = Graph::new();
        let (na, nb, nc) = (g.param(p, ia), g.param(p, ib), g.param(p, ic));
        let out = build(&mut g, na, nb, nc)?;
        let loss = if g.shape(out).is_empty() {
            out
        } else {
            let shape = g.shape(out).to_vec();
            let n: usize = shape.iter().product();
            let w = Array::new(shape, (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect())?;
            let w = g.constant(w);
            let prod = g.mul(out, w)?;
            g.sum(prod)?
        };
        let v = g.forward(p, &[])?;
        let grads = g.backward(&v, loss, p)?;
        Ok((v.scalar(loss), grads))
    })
    .unwrap();
    report.max_rel_error
}

macro_rules! op_test {
    ($name:ident, $a:expr, $b:expr, $c:expr, |$g:ident, $x:ident, $y:ident, $z:ident| $body:expr) => {
        #[test]
        fn $name() {
            let err = check($a, $b, $c, |$g, $x, $y, $z| {
                let _ = (&$x, &$y, &$z);
                $body
            });
            assert!(err < TOL, "relative error {err:e}");
        }
    };
}

op_test!(matmul, mat(3, 4, 1), mat(4, 2, 2), vector(1, 3), |g, a, b, _c| g.matmul(a, b));
op_test!(matmul_nt, mat(3, 4, 1), mat(5, 4, 2), vector(1, 3), |g, a, b, _c| g.matmul_nt(a, b));
op_test!(add, mat(2, 3, 1), mat(2, 3, 2), vector(1, 3), |g, a, b, _c| g.add(a, b));
op_test!(sub, mat(2, 3, 1), mat(2, 3, 2), vector(1, 3), |g, a, b, _c| g.sub(a, b));
op_test!(mul, mat(2, 3, 1), mat(2, 3, 2), vector(1, 3), |g, a, b, _c| g.mul(a, b));
op_test!(div, mat(2, 3, 1), mat(2, 3, 2), vector(1, 3), |g, a, b, _c| g.div(a, b));
op_test!(add_row, mat(3, 4, 1), vector(4, 2), vector(1, 3), |g, a, b, _c| g.add_row(a, b));
op_test!(mul_row, mat(3, 4, 1), vector(4, 2), vector(1, 3), |g, a, b, _c| g.mul_row(a, b));
op_test!(scale, mat(2, 3, 1), vector(1, 2), vector(1, 3), |g, a, _b, _c| g.scale(a, -2.5));
op_test!(offset, mat(2, 3, 1), vector(1, 2), vector(1, 3), |g, a, _b, _c| {
    let o = g.offset(a, 0.7)?;
    g.square(o)
});
op_test!(square, mat(2, 3, 1), vector(1, 2), vector(1, 3), |g, a, _b, _c| g.square(a));
op_test!(relu, mat(3, 3, 1), vector(1, 2), vector(1, 3), |g, a, _b, _c| g.relu(a));
op_test!(sigmoid, mat(2, 3, 1), vector(1, 2), vector(1, 3), |g, a, _b, _c| g.sigmoid(a));
op_test!(log_sigmoid, mat(2, 3, 1), vector(1, 2), vector(1, 3), |g, a, _b, _c| g.log_sigmoid(a));
op_test!(softmax, mat(3, 4, 1), vector(1, 2), vector(1, 3), |g, a, _b, _c| g.softmax(a));
op_test!(log_softmax, mat(3, 4, 1), vector(1, 2), vector(1, 3), |g, a, _b, _c| g.log_softmax(a));
op_test!(causal_softmax, mat(4, 4, 1), vector(1, 2), vector(1, 3), |g, a, _b, _c| g.causal_softmax(a));
op_test!(rms_norm, mat(3, 5, 1), vector(1, 2), vector(1, 3), |g, a, _b, _c| g.rms_norm(a, 1e-5));
op_test!(embed, mat(6, 3, 1), vector(1, 2), vector(1, 3), |g, a, _b, _c| g.embed(a, vec![4, 0, 4, 2]));
op_test!(pick_cols, mat(3, 5, 1), vector(1, 2), vector(1, 3), |g, a, _b, _c| g.pick_cols(a, vec![4, 0, 2]));
op_test!(slice_rows, mat(4, 3, 1), vector(1, 2), vector(1, 3), |g, a, _b, _c| g.slice_rows(a, 1, 3));
op_test!(slice_cols, mat(3, 5, 1), vector(1, 2), vector(1, 3), |g, a, _b, _c| g.slice_cols(a, 2, 5));
op_test!(concat_cols, mat(3, 2, 1), mat(3, 4, 2), mat(3, 1, 3), |g, a, b, c| g.concat_cols(&[a, b, c]));
op_test!(sum, mat(2, 3, 1), vector(1, 2), vector(1, 3), |g, a, _b, _c| {
    let s = g.square(a)?;
    g.sum(s)
});
op_test!(mean, mat(2, 3, 1), vector(1, 2), vector(1, 3), |g, a, _b, _c| {
    let s = g.square(a)?;
    g.mean(s)
});
op_test!(sum_rows, mat(3, 4, 1), vector(1, 2), vector(1, 3), |g, a, _b, _c| g.sum_rows(a));
op_test!(mean_rows, mat(3, 4, 1), vector(1, 2), vector(1, 3), |g, a, _b, _c| g.mean_rows(a));
op_test!(mse, mat(2, 3, 1), mat(2, 3, 2), vector(1, 3), |g, a, b, _c| g.mse(a, b));

// the mask is piecewise constant, so the gradient flows only through the
// masked values; finite differences agree away from ties
op_test!(top_k_and_union, vector(6, 1), vector(6, 2), vector(1, 3), |g, a, b, _c| {
    let ma = g.top_k_mask(a, 2)?;
    let mb = g.top_k_mask(b, 2)?;
    let m = g.mask_union(ma, mb)?;
    let d = g.sub(a, b)?;
    let d2 = g.square(d)?;
    let masked = g.mul(d2, m)?;
    g.sum(masked)
});

#[test]
fn stop_gradient_matches_constant_substitution() {
    let mut params = ParamSet::new();
    let ia = params.add("a", mat(2, 3, 1));
    let ib = params.add("b", mat(2, 3, 2));
    let mut g = Graph::new();
    let (na, nb) = (g.param(&params, ia), g.param(&params, ib));
    let sb = g.stop_gradient(nb).unwrap();
    let p = g.mul(na, sb).unwrap();
    let loss = g.sum(p).unwrap();
    let v = g.forward(&params, &[]).unwrap();
    let grads = g.backward(&v, loss, &params).unwrap();
    assert!(grads.get(ib).data().iter().all(|&x| x == 0.0));
    assert_eq!(grads.get(ia).data(), params.get(ib).data());
}

#[test]
fn division_by_zero_is_reported() {
    let mut params = ParamSet::new();
    let ia = params.add("a", Array::vector(vec![1.0, 2.0]));
    let ib = params.add("b", Array::vector(vec![1.0, 0.0]));
    let mut g = Graph::new();
    let (na, nb) = (g.param(&params, ia), g.param(&params, ib));
    let q = g.div(na, nb).unwrap();
    g.sum(q).unwrap();
    assert!(g.forward(&params, &[]).is_err());
}

fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Array::matrix(rows, cols, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_agrees_with_naive_product(a in small_matrix(3, 4), b in small_matrix(4, 5)) {
        let mut params = ParamSet::new();
        let ia = params.add("a", a.clone());
        let ib = params.add("b", b.clone());
        let mut g = Graph::new();
        let (na, nb) = (g.param(&params, ia), g.param(&params, ib));
        let c = g.matmul(na, nb).unwrap();
        let v = g.forward(&params, &[]).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let naive: f64 = (0..4).map(|k| a.at(i, k) * b.at(k, j)).sum();
                prop_assert!((v.get(c).at(i, j) - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(a in small_matrix(3, 6)) {
        let mut params = ParamSet::new();
        let ia = params.add("a", a);
        let mut g = Graph::new();
        let na = g.param(&params, ia);
        let s = g.softmax(na).unwrap();
        let ls = g.log_softmax(na).unwrap();
        let v = g.forward(&params, &[]).unwrap();
        for r in 0..3 {
            let row = v.get(s).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (p, lp) in row.iter().zip(v.get(ls).row(r)) {
                prop_assert!(*p > 0.0);
                prop_assert!((p.ln() - lp).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_sigmoid_never_exceeds_zero(x in -800.0f64..800.0) {
        let mut params = ParamSet::new();
        let ix = params.add("x", Array::scalar(x));
        let mut g = Graph::new();
        let nx = g.param(&params, ix);
        let y = g.log_sigmoid(nx).unwrap();
        let v = g.forward(&params, &[]).unwrap();
        let y = v.scalar(y);
        prop_assert!(y.is_finite() && y <= 0.0);
    }
}
