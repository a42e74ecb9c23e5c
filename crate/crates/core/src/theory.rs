//! Numerical checks of the KL-versus-feature-MSE bound.
//!
//! With `h = W_decᵀ c` and `z = W_outᵀ h`, a feature perturbation `Δc`
//! moves the logits by `Δz = K Δc` with `K = W_outᵀ W_decᵀ`. Since the
//! softmax KL is at most `½‖Δz‖²` for small `Δz`, the token-level KL is
//! bounded by `(M²/2)‖Δc‖²` where `M = ‖K‖₂`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_in_place, Array};
use crate::error::{Error, Result};
use crate::model::TinyLM;
use crate::sae::{topk_indices, SparseAutoencoder};

pub const POWER_TOL: f64 = 1e-8;
pub const POWER_MAX_ITERS: usize = 10_000;

/// Largest singular value of `k` (`[rows, cols]`) by power iteration on
/// `kᵀk`, stopping when `‖kᵀk v − λv‖ ≤ 1e-8·λ`.
pub fn operator_norm(k: &Array<f64>) -> Result<f64> {
    if k.shape().len() != 2 {
        return Err(Error::Contract(format!("operator_norm needs a matrix, got {:?}", k.shape())));
    }
    if !k.all_finite() {
        return Err(Error::Contract("operator_norm input has non-finite entries".into()));
    }
    let (r, c) = (k.rows(), k.cols());
    if r == 0 || c == 0 {
        return Ok(0.0);
    }
    let mut ktk = vec![0.0; c * c];
    for row in 0..r {
        let kr = k.row(row);
        for i in 0..c {
            for j in 0..c {
                ktk[i * c + j] += kr[i] * kr[j];
            }
        }
    }
    let apply = |v: &[f64]| -> Vec<f64> {
        (0..c)
            .map(|i| ktk[i * c..(i + 1) * c].iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    };
    // A non-uniform start avoids being orthogonal to the top direction of
    // structured matrices.
    let mut v: Vec<f64> = (0..c).map(|i| 1.0 + (i as f64 + 1.0).sqrt() * 1e-3).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut residual = f64::INFINITY;
    for _ in 0..POWER_MAX_ITERS {
        let w = apply(&v);
        let lambda: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        if lambda <= 0.0 {
            return Ok(0.0);
        }
        residual = w.iter().zip(&v).map(|(a, b)| (a - lambda * b).powi(2)).sum::<f64>().sqrt();
        if residual <= POWER_TOL * lambda {
            return Ok(lambda.sqrt());
        }
        let nw = norm(&w);
        v = w.into_iter().map(|x| x / nw).collect();
    }
    Err(Error::NoConvergence {
        iterations: POWER_MAX_ITERS,
        residual,
    })
}

/// `KL(softmax(z_ref) ‖ softmax(z))`, exact.
pub fn softmax_kl(z_ref: &[f64], z: &[f64]) -> f64 {
    let mut a = z_ref.to_vec();
    let mut b = z.to_vec();
    log_softmax_in_place(&mut a);
    log_softmax_in_place(&mut b);
    a.iter().zip(&b).map(|(&la, &lb)| la.exp() * (la - lb)).sum::<f64>().max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadReport {
    pub trials: usize,
    pub scale: f64,
    pub violations: usize,
    /// Largest `KL / (½‖Δz‖²)`; 0 when `Δz = 0`.
    pub max_ratio: f64,
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (trial as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn ratio(kl: f64, bound: f64) -> f64 {
    if bound == 0.0 {
        0.0
    } else {
        kl / bound
    }
}

/// Checks `KL(p_ref ‖ p_θ) ≤ ½‖Δz‖²` for Gaussian `Δz` of standard
/// deviation `scale` around the logits `z`.
pub fn logit_kl_quad_check(z: &[f64], trials: usize, scale: f64, seed: u64) -> Result<QuadReport> {
    if z.is_empty() || !(scale >= 0.0) {
        return Err(Error::Contract("need non-empty logits and scale >= 0".into()));
    }
    let per: Vec<(bool, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let dz: Vec<f64> = z.iter().map(|_| scale * normal.sample(&mut rng)).collect();
            let z2: Vec<f64> = z.iter().zip(&dz).map(|(a, b)| a + b).collect();
            let kl = softmax_kl(z, &z2);
            let bound = 0.5 * dz.iter().map(|x| x * x).sum::<f64>();
            (kl > bound, ratio(kl, bound))
        })
        .collect();
    Ok(QuadReport {
        trials,
        scale,
        violations: per.iter().filter(|p| p.0).count(),
        max_ratio: per.iter().map(|p| p.1).fold(0.0, f64::max),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub trials: usize,
    pub scale: f64,
    pub violations: usize,
    /// Largest `KL / ((M²/2)‖Δc‖²)`.
    pub max_ratio: f64,
    pub operator_norm: f64,
    /// Observed `max |decode(encode(h)) − h|`.
    pub epsilon: f64,
    /// Largest `|Δz_model − KΔc|` over trials and vocabulary.
    pub linearization_max_error: f64,
    /// Violations of the `(M²·m/2)·MSE` form on the top-m union.
    pub topk_violations: usize,
    /// Smallest `(M²·m/2)·MSE − (M²/2)‖Δc‖²`; non-negative when the union
    /// covers every perturbed coordinate.
    pub min_topk_gap: f64,
}

/// Reconstruction tolerance below which a dictionary counts as exact.
pub const EXACT_EPS: f64 = 1e-10;

/// `K = W_outᵀ W_decᵀ`, `[V, m]`.
pub fn bound_matrix(model: &TinyLM<f64>, sae: &SparseAutoencoder<f64>) -> Result<Array<f64>> {
    if sae.dim() != model.config().d_model {
        return Err(Error::Dimension {
            expected: model.config().d_model,
            got: sae.dim(),
        });
    }
    // (W_dec W_out)ᵀ
    Ok(sae.w_dec().matmul(model.w_out())?.transpose())
}

/// Monte-Carlo check of `KL ≤ (M²/2)‖Δc‖²` with hidden states built as
/// `h = W_decᵀ c`.
///
/// Each trial draws a base state `h ~ N(0, I)`, encodes it, perturbs the
/// code by Gaussian `Δc` of standard deviation `scale`, and compares the
/// exact logit KL through `W_out` with the bound. Refuses dictionaries
/// that do not reconstruct exactly.
pub fn kl_mse_bound_check(
    model: &TinyLM<f64>,
    sae: &SparseAutoencoder<f64>,
    trials: usize,
    scale: f64,
    seed: u64,
) -> Result<BoundReport> {
    if !(scale >= 0.0) {
        return Err(Error::Contract(format!("scale must be >= 0, got {scale}")));
    }
    let k_mat = bound_matrix(model, sae)?;
    let m_norm = operator_norm(&k_mat)?;
    let (d, m, v) = (sae.dim(), sae.width(), model.config().vocab);

    struct Trial {
        eps: f64,
        violated: bool,
        ratio: f64,
        linearization: f64,
        topk_violated: bool,
        gap: f64,
    }
    let per: Vec<Result<Trial>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let h: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
            let c = sae.encode(&h)?;
            let back = sae.decode(&c)?;
            let eps = h.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let dc: Vec<f64> = (0..m).map(|_| scale * normal.sample(&mut rng)).collect();
            let c2: Vec<f64> = c.iter().zip(&dc).map(|(a, b)| a + b).collect();
            let h2 = sae.decode(&c2)?;
            let z = model.logits_from_hidden(&Array::matrix(1, d, back)?)?;
            let z2 = model.logits_from_hidden(&Array::matrix(1, d, h2)?)?;
            let dz_k = k_mat.matmul(&Array::matrix(m, 1, dc.clone())?)?;
            let linearization = (0..v)
                .map(|i| (z2.data()[i] - z.data()[i] - dz_k.data()[i]).abs())
                .fold(0.0, f64::max);
            let kl = softmax_kl(z.data(), z2.data());
            let sq: f64 = dc.iter().map(|x| x * x).sum();
            let bound = 0.5 * m_norm * m_norm * sq;
            let union: Vec<usize> = {
                let mut s = topk_indices(&c, m)?;
                s.extend(topk_indices(&c2, m)?);
                s.sort_unstable();
                s.dedup();
                s
            };
            let mse = union.iter().map(|&i| dc[i] * dc[i]).sum::<f64>() / m as f64;
            let topk_bound = 0.5 * m_norm * m_norm * m as f64 * mse;
            Ok(Trial {
                eps,
                violated: kl > bound,
                ratio: ratio(kl, bound),
                linearization,
                topk_violated: kl > topk_bound,
                gap: topk_bound - bound,
            })
        })
        .collect();
    let mut report = BoundReport {
        trials,
        scale,
        violations: 0,
        max_ratio: 0.0,
        operator_norm: m_norm,
        epsilon: 0.0,
        linearization_max_error: 0.0,
        topk_violations: 0,
        min_topk_gap: f64::INFINITY,
    };
    for p in per {
        let p = p?;
        report.epsilon = report.epsilon.max(p.eps);
        report.violations += p.violated as usize;
        report.max_ratio = report.max_ratio.max(p.ratio);
        report.linearization_max_error = report.linearization_max_error.max(p.linearization);
        report.topk_violations += p.topk_violated as usize;
        report.min_topk_gap = report.min_topk_gap.min(p.gap);
    }
    if trials == 0 {
        report.min_topk_gap = 0.0;
    }
    if report.epsilon > EXACT_EPS {
        return Err(Error::Contract(format!(
            "dictionary does not reconstruct exactly: measured epsilon {:e}",
            report.epsilon
        )));
    }
    Ok(report)
}

/// Bound checks at several perturbation scales, in the given order.
pub fn scale_sweep(
    model: &TinyLM<f64>,
    sae: &SparseAutoencoder<f64>,
    trials: usize,
    scales: &[f64],
    seed: u64,
) -> Result<Vec<BoundReport>> {
    scales
        .iter()
        .map(|&s| kl_mse_bound_check(model, sae, trials, s, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LmConfig;

    fn lm() -> TinyLM<f64> {
        let cfg = LmConfig {
            vocab: 16,
            d_model: 8,
            layers: 1,
            heads: 2,
            context: 8,
            d_ff: 8,
        };
        TinyLM::init(cfg, 11).unwrap()
    }

    #[test]
    fn operator_norm_small_cases() {
        assert!((operator_norm(&Array::identity(5)).unwrap() - 1.0).abs() < 1e-12);
        let d = Array::from_f64(&[2, 2], &[3.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((operator_norm(&d).unwrap() - 3.0).abs() < 1e-8);
        assert_eq!(operator_norm(&Array::<f64>::zeros(&[3, 2])).unwrap(), 0.0);
        let bad = Array::from_f64(&[1, 2], &[f64::NAN, 1.0]).unwrap();
        assert!(operator_norm(&bad).is_err());
    }

    #[test]
    fn kl_of_identical_logits_is_zero() {
        assert_eq!(softmax_kl(&[0.3, -2.0, 5.0], &[0.3, -2.0, 5.0]), 0.0);
    }

    #[test]
    fn quad_bound_holds_at_small_scale() {
        let r = logit_kl_quad_check(&[0.1, -0.4, 1.3, 0.0, 2.2], 1000, 1e-3, 4).unwrap();
        assert_eq!(r.violations, 0);
        assert!(r.max_ratio <= 1.0);
        let zero = logit_kl_quad_check(&[0.0; 4], 3, 0.0, 4).unwrap();
        assert_eq!(zero.max_ratio, 0.0);
    }

    #[test]
    fn bound_holds_under_exact_reconstruction() {
        let model = lm();
        let sae = SparseAutoencoder::exact_reconstruction(8).unwrap();
        let r = kl_mse_bound_check(&model, &sae, 200, 1e-3, 1).unwrap();
        assert_eq!(r.violations, 0);
        assert_eq!(r.topk_violations, 0);
        assert!(r.epsilon <= EXACT_EPS);
        assert!(r.linearization_max_error < 1e-10, "{r:?}");
        assert!(r.min_topk_gap >= -1e-15);
        let zero = kl_mse_bound_check(&model, &sae, 4, 0.0, 1).unwrap();
        assert_eq!((zero.violations, zero.max_ratio), (0, 0.0));
    }

    #[test]
    fn inexact_dictionary_is_refused() {
        let sae = SparseAutoencoder::init(8, 32, 0.0, 3).unwrap();
        match kl_mse_bound_check(&lm(), &sae, 10, 1e-3, 1) {
            Err(Error::Contract(msg)) => assert!(msg.contains("epsilon"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }
}
