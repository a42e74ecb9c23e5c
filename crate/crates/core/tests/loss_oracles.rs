use fpo_lab::autodiff::Array;
use fpo_lab::cache::{precompute, RefCache};
use fpo_lab::data::PreferencePair;
use fpo_lab::losses::{
    batch_loss, d_fpo, delta_fpo, delta_tdpo1, delta_tdpo2, dpo_u, gamma_ref_ln, kl_rows, seq_kl, simpo_u, Divisor,
    LossConfig, LossContext, Method,
};
use fpo_lab::model::{LmConfig, Tap, TinyLM};
use fpo_lab::sae::{PoolingMode, SparseAutoencoder};
use proptest::prelude::*;

fn lm() -> LmConfig {
    LmConfig {
        vocab: 16,
        d_model: 8,
        layers: 2,
        heads: 2,
        context: 24,
        d_ff: 12,
    }
}

const TAP: Tap = Tap {
    layer: 1,
    kind: fpo_lab::model::TapKind::Residual,
};
const K: usize = 4;

fn pairs() -> Vec<PreferencePair> {
    vec![
        PreferencePair {
            pair_id: 11,
            x: vec![5, 6, 1],
            y_w: vec![7, 8, 2],
            y_l: vec![9, 2],
        },
        PreferencePair {
            pair_id: 12,
            x: vec![4, 1],
            y_w: vec![10, 11, 12, 2],
            y_l: vec![13, 14, 15, 3, 2],
        },
    ]
}

struct Fixture {
    policy: TinyLM<f64>,
    reference: TinyLM<f64>,
    sae: SparseAutoencoder<f64>,
    cache: RefCache<f64>,
}

fn fixture() -> Fixture {
    let reference = TinyLM::<f64>::init(lm(), 2).unwrap();
    let policy = TinyLM::<f64>::init(lm(), 3).unwrap();
    let sae = SparseAutoencoder::<f64>::init(8, 16, 0.0, 4).unwrap();
    let cache = precompute(&pairs(), &reference, &sae, TAP, PoolingMode::Mean, K).unwrap();
    Fixture {
        policy,
        reference,
        sae,
        cache,
    }
}

fn config(method: Method) -> LossConfig {
    LossConfig {
        k: K,
        tap: TAP,
        alpha_constraint: 0.7,
        ..LossConfig::for_method(method)
    }
}

fn softplus_neg(u: f64) -> f64 {
    // −log σ(u) written out directly
    (1.0 + (-u).exp()).ln()
}

/// `u` for every method assembled from the value helpers alone.
fn straight_line_u(f: &Fixture, cfg: &LossConfig, p: &PreferencePair) -> f64 {
    let (pol, re) = (&f.policy, &f.reference);
    let (a, b) = (cfg.alpha_constraint, cfg.beta);
    match cfg.method {
        Method::Dpo => dpo_u(pol, re, p, b).unwrap(),
        Method::Simpo => simpo_u(pol, p, b, cfg.gamma_const).unwrap(),
        Method::Tdpo1 => dpo_u(pol, re, p, b).unwrap() - delta_tdpo1(pol, re, p, b).unwrap(),
        Method::Tdpo2 => dpo_u(pol, re, p, b).unwrap() - delta_tdpo2(pol, re, p, a, b).unwrap(),
        Method::SimpoKl => simpo_u(pol, p, b, cfg.gamma_const).unwrap() - delta_tdpo2(pol, re, p, a, b).unwrap(),
        Method::Fpo => {
            let lpd = simpo_u(pol, p, b, 0.0).unwrap();
            lpd - gamma_ref_ln(re, &p.x, &p.y_w, &p.y_l, b).unwrap() - delta_fpo(pol, &f.sae, &f.cache, p, cfg).unwrap()
        }
    }
}

fn context(f: &Fixture, method: Method) -> LossContext<'_, f64> {
    if method == Method::Fpo {
        LossContext::cached(&f.sae, &f.cache)
    } else {
        LossContext::live(&f.reference)
    }
}

#[test]
fn batch_loss_matches_straight_line_oracle() {
    let f = fixture();
    for method in Method::ALL {
        let cfg = config(method);
        let (b, _) = batch_loss(&f.policy, &pairs(), &context(&f, method), &cfg).unwrap();
        let mut loss = 0.0;
        for (t, p) in b.pairs.iter().zip(pairs()) {
            let u = straight_line_u(&f, &cfg, &p);
            assert!((t.u - u).abs() < 1e-10, "{method}: {} vs {u}", t.u);
            loss += softplus_neg(u) / 2.0;
        }
        assert!((b.loss - loss).abs() < 1e-10, "{method}: {} vs {loss}", b.loss);
    }
}

#[test]
fn hand_computed_values() {
    // DPO with β = 0.1 and policy-minus-reference log-ratio gaps 0.7 and −0.686
    let u: f64 = 0.1 * 0.7 - 0.1 * (-0.6863);
    assert!((u - 0.13863).abs() < 1e-5);
    assert!((softplus_neg(u) - 0.626232).abs() < 1e-6);
    assert!((softplus_neg(0.0) - std::f64::consts::LN_2).abs() < 1e-15);

    // KL((0.5, 0.5) ‖ (0.8, 0.2)) on one row
    let r = Array::matrix(1, 2, vec![0.5f64.ln(), 0.5f64.ln()]).unwrap();
    let q = Array::matrix(1, 2, vec![0.8f64.ln(), 0.2f64.ln()]).unwrap();
    let kl = kl_rows(&r, &q);
    assert!((kl - (0.5 * (0.5f64 / 0.8).ln() + 0.5 * (0.5f64 / 0.2).ln())).abs() < 1e-15);
    assert!((kl - 0.22314).abs() < 1e-5);
    // two identical rows add
    let r2 = Array::matrix(2, 2, vec![0.5f64.ln(); 4]).unwrap();
    let q2 = Array::matrix(2, 2, vec![0.8f64.ln(), 0.2f64.ln(), 0.8f64.ln(), 0.2f64.ln()]).unwrap();
    assert!((kl_rows(&r2, &q2) - 2.0 * kl).abs() < 1e-15);

    // single unit of discrepancy on feature 0; ties in the reference go to the smaller index
    let c = [1.0f64, 0.0, 0.0, 0.0];
    let z = [0.0f64; 4];
    assert_eq!(d_fpo(&c, &z, None, 1, None, Divisor::K).unwrap(), 1.0);
    assert_eq!(d_fpo(&c, &z, None, 2, None, Divisor::K).unwrap(), 0.5);
    assert_eq!(d_fpo(&c, &z, None, 2, None, Divisor::UnionSize).unwrap(), 0.5);
    // disjoint top-1 sets: union has two elements
    let a = [2.0f64, 0.0, 0.0, 0.0];
    let b = [0.0f64, 0.0, 3.0, 0.0];
    assert_eq!(d_fpo(&a, &b, None, 1, None, Divisor::K).unwrap(), 13.0);
    assert_eq!(d_fpo(&a, &b, None, 1, None, Divisor::UnionSize).unwrap(), 6.5);
    let w = [0.5, 1.0, 2.0, 1.0];
    assert_eq!(d_fpo(&a, &b, None, 1, Some(&w), Divisor::K).unwrap(), 0.5 * 4.0 + 2.0 * 9.0);
    // stored reference indices replace the reference top-k
    assert_eq!(d_fpo(&a, &b, Some(&[3]), 1, None, Divisor::K).unwrap(), 4.0);
}

#[test]
fn fpo_delta_hand_example() {
    // α = 0.5, β = 0.1, D_w = 0, D_l = 1
    let (a, b, dw, dl) = (0.5, 0.1, 0.0, 1.0);
    assert!((a * (b * dl - b * dw) - 0.05f64).abs() < 1e-15);
    let f = fixture();
    let cfg = LossConfig {
        alpha_constraint: 0.5,
        beta: 0.1,
        ..config(Method::Fpo)
    };
    let p = &pairs()[0];
    let (b_terms, _) = batch_loss(&f.policy, std::slice::from_ref(p), &context(&f, Method::Fpo), &cfg).unwrap();
    let t = &b_terms.pairs[0];
    let want = 0.5 * (0.1 * t.constraint_rejected - 0.1 * t.constraint_chosen);
    assert!((t.delta - want).abs() < 1e-12);
    assert!((t.delta - delta_fpo(&f.policy, &f.sae, &f.cache, p, &cfg).unwrap()).abs() < 1e-12);
}

#[test]
fn fpo_without_constraint_is_length_normalized_dpo() {
    let f = fixture();
    let cfg = LossConfig {
        alpha_constraint: 0.0,
        ..config(Method::Fpo)
    };
    let (b, _) = batch_loss(&f.policy, &pairs(), &context(&f, Method::Fpo), &cfg).unwrap();
    for (t, p) in b.pairs.iter().zip(pairs()) {
        let lw = (f.policy.seq_logprob(&p.x, &p.y_w, true).unwrap() - f.reference.seq_logprob(&p.x, &p.y_w, true).unwrap())
            * cfg.beta;
        let ll = (f.policy.seq_logprob(&p.x, &p.y_l, true).unwrap() - f.reference.seq_logprob(&p.x, &p.y_l, true).unwrap())
            * cfg.beta;
        assert!((t.u - (lw - ll)).abs() < 1e-10);
    }
}

#[test]
fn reference_methods_reject_missing_reference() {
    let f = fixture();
    for m in [Method::Dpo, Method::Tdpo1, Method::Tdpo2, Method::SimpoKl] {
        assert!(batch_loss(&f.policy, &pairs(), &LossContext::none(), &config(m)).is_err());
    }
    assert!(batch_loss(&f.policy, &pairs(), &LossContext::none(), &config(Method::Simpo)).is_ok());
    assert!(batch_loss(&f.policy, &pairs(), &LossContext::none(), &config(Method::Fpo)).is_err());
}

fn features() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, 6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn discrepancy_is_nonnegative_and_symmetric(a in features(), b in features(), k in 1usize..6) {
        let ab = d_fpo(&a, &b, None, k, None, Divisor::K).unwrap();
        let ba = d_fpo(&b, &a, None, k, None, Divisor::K).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert_eq!(d_fpo(&a, &a, None, k, None, Divisor::K).unwrap(), 0.0);
        let u = d_fpo(&a, &b, None, k, None, Divisor::UnionSize).unwrap();
        // the union has between k and 2k elements
        prop_assert!(u <= ab + 1e-12 && u >= ab / 2.0 - 1e-12);
    }

    #[test]
    fn terms_decompose_and_loss_is_mean_softplus(seed in 0u64..200, mi in 0usize..6, alpha in 0.0f64..2.0) {
        let f = Fixture { policy: TinyLM::<f64>::init(lm(), seed + 100).unwrap(), ..fixture() };
        let method = Method::ALL[mi];
        let cfg = LossConfig { alpha_constraint: alpha, ..config(method) };
        let (b, _) = batch_loss(&f.policy, &pairs(), &context(&f, method), &cfg).unwrap();
        let mut mean = 0.0;
        for t in &b.pairs {
            prop_assert!((t.u - (t.lpd - t.margin - t.delta)).abs() < 1e-12);
            prop_assert!(t.constraint_chosen >= -1e-15 && t.constraint_rejected >= -1e-15);
            mean += softplus_neg(t.u) / b.pairs.len() as f64;
        }
        prop_assert!((b.loss - mean).abs() < 1e-12);
        prop_assert!(b.loss > 0.0);
    }

    #[test]
    fn swapping_responses_negates_reference_terms(seed in 0u64..200) {
        let f = Fixture { policy: TinyLM::<f64>::init(lm(), seed + 300).unwrap(), ..fixture() };
        for p in pairs() {
            let q = PreferencePair { y_w: p.y_l.clone(), y_l: p.y_w.clone(), ..p.clone() };
            let (pol, re) = (&f.policy, &f.reference);
            prop_assert!((dpo_u(pol, re, &p, 0.1).unwrap() + dpo_u(pol, re, &q, 0.1).unwrap()).abs() < 1e-12);
            prop_assert!((delta_tdpo1(pol, re, &p, 0.1).unwrap() + delta_tdpo1(pol, re, &q, 0.1).unwrap()).abs() < 1e-12);
            prop_assert!(seq_kl(pol, re, &p.x, &p.y_w).unwrap() >= 0.0);
            prop_assert!(seq_kl(re, re, &p.x, &p.y_w).unwrap().abs() < 1e-15);
        }
    }

    #[test]
    fn larger_margin_never_lowers_the_loss(gamma in 0.0f64..2.0, extra in 0.0f64..2.0) {
        let f = fixture();
        let lo = LossConfig { gamma_const: gamma, ..config(Method::Simpo) };
        let hi = LossConfig { gamma_const: gamma + extra, ..config(Method::Simpo) };
        let (a, _) = batch_loss(&f.policy, &pairs(), &LossContext::none(), &lo).unwrap();
        let (b, _) = batch_loss(&f.policy, &pairs(), &LossContext::none(), &hi).unwrap();
        prop_assert!(b.loss >= a.loss - 1e-15);
    }
}
