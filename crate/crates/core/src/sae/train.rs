use rand::seq::index::sample;
use rayon::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sparsity_stats, SparseAutoencoder, SparsityStats, W_DEC};
use crate::autodiff::{Array, Graph, Scalar};
use crate::error::{Error, Result};
use crate::model::{Tap, TinyLM};
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeConfig {
    /// Dictionary width; `None` means `4·d`.
    pub width: Option<usize>,
    pub alpha_l1: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Rescale decoder rows to unit norm after every step, so the L1 term
    /// cannot be dodged by shrinking codes and growing the dictionary.
    pub unit_norm_decoder: bool,
    /// Number of rows ranked by the sparsity report.
    pub top_n: usize,
}

impl Default for SaeConfig {
    fn default() -> Self {
        Self {
            width: None,
            alpha_l1: 1.0,
            steps: 1500,
            batch_size: 128,
            optimizer: AdamConfig {
                lr: 2e-3,
                warmup_steps: 50,
                clip_norm: 0.0,
                ..Default::default()
            },
            seed: 0,
            unit_norm_decoder: true,
            top_n: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeReport {
    /// Mean `‖h − ĥ‖²` per row.
    pub initial_mse: f64,
    pub final_mse: f64,
    pub initial: SparsityStats,
    pub last: SparsityStats,
    pub losses: Vec<f64>,
}

fn reconstruction_error<T: Scalar>(sae: &SparseAutoencoder<T>, data: &Array<T>) -> Result<f64> {
    let c = sae.encode_rows(data)?;
    let (n, m, d) = (data.rows(), sae.width(), sae.dim());
    let mut rec = vec![T::zero(); n * d];
    T::gemm(n, m, d, c.data(), false, sae.w_dec().data(), false, T::zero(), &mut rec);
    let err: f64 = data
        .data()
        .iter()
        .zip(&rec)
        .map(|(&a, &b)| (a - b).as_f64().powi(2))
        .sum();
    Ok(err / n as f64)
}

fn normalize_rows<T: Scalar>(w: &mut Array<T>) {
    let d = w.cols();
    for row in w.data_mut().chunks_mut(d) {
        let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
        if n > T::zero() {
            row.iter_mut().for_each(|x| *x = *x / n);
        }
    }
}

/// Hidden states at `tap` for every position of the first sequences of
/// `corpus`, stopping once `max_rows` rows are gathered.
pub fn collect_activations<T: Scalar>(
    model: &TinyLM<T>,
    corpus: &[Vec<u32>],
    tap: Tap,
    max_rows: usize,
) -> Result<Array<T>> {
    let mut take = 0;
    let mut rows = 0;
    while take < corpus.len() && rows < max_rows {
        rows += corpus[take].len();
        take += 1;
    }
    let parts: Vec<Result<Array<T>>> = corpus[..take]
        .par_iter()
        .map(|seq| {
            let mut tr = model.forward(seq, &[tap])?;
            Ok(tr.taps.remove(0).1)
        })
        .collect();
    let d = model.config().d_model;
    let mut data = Vec::with_capacity(rows.min(max_rows) * d);
    for part in parts {
        data.extend_from_slice(part?.data());
    }
    data.truncate(max_rows * d);
    if data.is_empty() {
        return Err(Error::Empty("activation corpus"));
    }
    Array::matrix(data.len() / d, d, data)
}

/// Trains an SAE on `[N, d]` hidden states gathered from a frozen model.
pub fn train_sae<T: Scalar>(
    data: &Array<T>,
    cfg: &SaeConfig,
) -> Result<(SparseAutoencoder<T>, SaeReport)> {
    if data.shape().len() != 2 || data.rows() == 0 {
        return Err(Error::Empty("SAE training data"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let (n, d) = (data.rows(), data.cols());
    let m = cfg.width.unwrap_or(4 * d);
    let mut sae = SparseAutoencoder::init(d, m, cfg.alpha_l1, cfg.seed)?;
    let initial_mse = reconstruction_error(&sae, data)?;
    let initial = sparsity_stats(&sae.encode_rows(data)?, cfg.top_n);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = Adam::new(cfg.optimizer, sae.params());
    let mut losses = Vec::with_capacity(cfg.steps);
    let b = cfg.batch_size.min(n);
    for step in 0..cfg.steps {
        let rows = sample(&mut rng, n, b);
        let mut batch = Vec::with_capacity(b * d);
        for r in rows.iter() {
            batch.extend_from_slice(data.row(r));
        }
        let mut g = Graph::new();
        let nodes = sae.leaves(&mut g);
        let h = g.constant(Array::matrix(b, d, batch)?);
        let loss = sae.build_loss(&mut g, &nodes, h)?;
        let v = g.forward(sae.params(), &[]).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Divergence { step },
            other => other,
        })?;
        let value = v.scalar(loss).as_f64();
        if !value.is_finite() {
            return Err(Error::Divergence { step });
        }
        losses.push(value);
        let grads = g.backward(&v, loss, sae.params())?;
        opt.step(sae.params_mut(), &grads);
        if cfg.unit_norm_decoder {
            normalize_rows(sae.params_mut().get_mut(W_DEC));
        }
        if !sae.params().arrays().iter().all(|a| a.all_finite()) {
            return Err(Error::Divergence { step });
        }
    }
    let final_mse = reconstruction_error(&sae, data)?;
    let last = sparsity_stats(&sae.encode_rows(data)?, cfg.top_n);
    Ok((
        sae,
        SaeReport {
            initial_mse,
            final_mse,
            initial,
            last,
            losses,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    /// Sparse mixtures of a few hidden directions, the regime SAEs target.
    fn synthetic(n: usize, d: usize, seed: u64) -> Array<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let atoms: Vec<Vec<f64>> = (0..3 * d)
            .map(|_| (0..d).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            let mut h = vec![0.0; d];
            for j in 0..2 {
                let a = &atoms[(i * 7 + j * 13) % atoms.len()];
                let w = 1.0 + normal.sample(&mut rng).abs();
                h.iter_mut().zip(a).for_each(|(x, y)| *x += w * y);
            }
            out.extend(h.into_iter().map(|x| x as f32));
        }
        Array::matrix(n, d, out).unwrap()
    }

    fn quick(alpha: f64) -> SaeConfig {
        SaeConfig {
            alpha_l1: alpha,
            steps: 300,
            batch_size: 64,
            top_n: 4,
            ..Default::default()
        }
    }

    #[test]
    fn zero_rate_keeps_init() {
        let data = synthetic(64, 8, 1);
        let mut cfg = quick(0.1);
        cfg.steps = 3;
        cfg.optimizer.lr = 0.0;
        cfg.unit_norm_decoder = false;
        let (sae, _) = train_sae(&data, &cfg).unwrap();
        assert_eq!(sae, SparseAutoencoder::init(8, 32, 0.1, cfg.seed).unwrap());
    }

    #[test]
    fn training_reduces_error_and_l1_reduces_l0() {
        let data = synthetic(512, 8, 2);
        let (_, dense) = train_sae(&data, &quick(0.0)).unwrap();
        let (_, sparse) = train_sae(&data, &quick(0.05)).unwrap();
        assert!(dense.final_mse < dense.initial_mse, "{dense:?}");
        assert!(sparse.final_mse < sparse.initial_mse, "{sparse:?}");
        assert!(
            sparse.last.mean_l0 < dense.last.mean_l0,
            "L0 {} vs {}",
            sparse.last.mean_l0,
            dense.last.mean_l0
        );
    }
}
