use fpo_lab::autodiff::Array;
use fpo_lab::model::{LmConfig, TinyLM};
use fpo_lab::sae::SparseAutoencoder;
use fpo_lab::theory::{bound_matrix, kl_mse_bound_check, logit_kl_quad_check, operator_norm, scale_sweep, softmax_kl};
use fpo_lab::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn svd_norm(a: &Array<f64>) -> f64 {
    let m = DMatrix::from_row_slice(a.rows(), a.cols(), a.data());
    m.singular_values().max()
}

fn model() -> TinyLM<f64> {
    TinyLM::init(
        LmConfig {
            vocab: 64,
            d_model: 16,
            layers: 1,
            heads: 2,
            context: 8,
            d_ff: 16,
        },
        5,
    )
    .unwrap()
}

#[test]
fn bound_matrix_norm_matches_svd() {
    let m = model();
    let sae = SparseAutoencoder::<f64>::exact_reconstruction(16).unwrap();
    let k = bound_matrix(&m, &sae).unwrap();
    assert_eq!(k.shape(), &[64, 32]);
    let ours = operator_norm(&k).unwrap();
    let svd = svd_norm(&k);
    assert!((ours - svd).abs() <= 1e-6 * svd, "{ours} vs {svd}");
}

#[test]
fn bound_holds_for_exact_dictionary() {
    let m = model();
    let sae = SparseAutoencoder::<f64>::exact_reconstruction(16).unwrap();
    let r = kl_mse_bound_check(&m, &sae, 500, 1e-3, 7).unwrap();
    assert_eq!(r.violations, 0);
    assert_eq!(r.topk_violations, 0);
    assert!(r.linearization_max_error <= 1e-10, "{}", r.linearization_max_error);
    assert!(r.epsilon <= 1e-10);
    assert!(r.max_ratio > 0.0 && r.max_ratio <= 1.0);
    let sweep = scale_sweep(&m, &sae, 200, &[1e-3, 1e-1, 1.0], 7).unwrap();
    assert_eq!(sweep.len(), 3);
    assert!(sweep.iter().all(|r| r.violations == 0));
}

#[test]
fn inexact_dictionary_is_refused() {
    let m = model();
    let sae = SparseAutoencoder::<f64>::init(16, 64, 0.0, 1).unwrap();
    match kl_mse_bound_check(&m, &sae, 10, 1e-3, 7) {
        Err(Error::Contract(msg)) => assert!(msg.contains("epsilon"), "{msg}"),
        other => panic!("expected a contract error, got {other:?}"),
    }
}

#[test]
fn logit_quadratic_bound_on_uniform_and_peaked_logits() {
    let r = logit_kl_quad_check(&[0.0; 10], 300, 0.5, 3).unwrap();
    assert_eq!(r.violations, 0);
    let mut peaked = vec![0.0; 10];
    peaked[3] = 12.0;
    let r = logit_kl_quad_check(&peaked, 300, 2.0, 4).unwrap();
    assert_eq!(r.violations, 0);
    assert!(r.max_ratio < 1.0);
}

fn matrix() -> impl Strategy<Value = Array<f64>> {
    (1usize..8, 1usize..8).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0f64..3.0, r * c).prop_map(move |d| Array::matrix(r, c, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn power_iteration_agrees_with_svd(a in matrix()) {
        let svd = svd_norm(&a);
        let ours = operator_norm(&a).unwrap();
        prop_assert!((ours - svd).abs() <= 1e-6 * svd.max(1e-12), "{} vs {}", ours, svd);
    }

    #[test]
    fn softmax_kl_is_below_half_squared_shift(
        z in prop::collection::vec(-5.0f64..5.0, 2..12),
        seed in any::<u64>(),
    ) {
        let shift: Vec<f64> = z
            .iter()
            .enumerate()
            .map(|(i, _)| (((seed >> (i % 60)) & 0xff) as f64 - 127.5) / 40.0)
            .collect();
        let z2: Vec<f64> = z.iter().zip(&shift).map(|(a, b)| a + b).collect();
        let kl = softmax_kl(&z, &z2);
        prop_assert!(kl >= 0.0);
        prop_assert!(kl <= 0.5 * shift.iter().map(|x| x * x).sum::<f64>() + 1e-12);
    }
}
