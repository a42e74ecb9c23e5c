use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{vocab, TinyLM};
use crate::autodiff::{Gradients, Graph, ParamSet, Scalar};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Fraction of the corpus (taken from the end) held out for evaluation.
    pub heldout_fraction: f64,
    /// Cap on held-out sequences scored per evaluation.
    pub heldout_cap: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            optimizer: AdamConfig {
                lr: 3e-3,
                warmup_steps: 100,
                ..Default::default()
            },
            seed: 0,
            heldout_fraction: 0.05,
            heldout_cap: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    pub initial_heldout_ce: f64,
    pub final_heldout_ce: f64,
    pub train_losses: Vec<f64>,
}

/// Mean next-token cross-entropy of one sequence, as a graph.
fn sequence_loss<T: Scalar>(model: &TinyLM<T>, seq: &[u32]) -> Result<(Graph<T>, crate::autodiff::NodeId)> {
    if seq.is_empty() {
        return Err(Error::Empty("training sequence"));
    }
    let mut tokens = Vec::with_capacity(seq.len());
    tokens.push(vocab::BOS);
    tokens.extend_from_slice(&seq[..seq.len() - 1]);
    let mut g = Graph::new();
    let leaves = model.leaves(&mut g);
    let nodes = model.build(&mut g, &leaves, &tokens, &[])?;
    let lsm = g.log_softmax(nodes.logits)?;
    let picked = g.pick_cols(lsm, seq.iter().map(|&t| t as usize).collect())?;
    let mean = g.mean(picked)?;
    let loss = g.scale(mean, -T::one())?;
    Ok((g, loss))
}

/// Sums per-item gradients in item order, so the result does not depend
/// on how rayon schedules the work.
pub(crate) fn ordered_grad_sum<T, I, F>(
    params: &ParamSet<T>,
    items: &[I],
    f: F,
) -> Result<(Vec<f64>, Gradients<T>)>
where
    T: Scalar,
    I: Sync,
    F: Fn(&I) -> Result<(f64, Gradients<T>)> + Sync + Send,
{
    let parts: Vec<Result<(f64, Gradients<T>)>> = items.par_iter().map(&f).collect();
    let mut total = params.zeros_like();
    let mut values = Vec::with_capacity(items.len());
    for part in parts {
        let (v, g) = part?;
        values.push(v);
        for id in total.ids().collect::<Vec<_>>() {
            total.get_mut(id).add_assign(g.get(id));
        }
    }
    Ok((values, total))
}

/// Mean over sequences of the per-token cross-entropy (nats).
pub fn heldout_cross_entropy<T: Scalar>(model: &TinyLM<T>, corpus: &[Vec<u32>]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Empty("held-out corpus"));
    }
    let losses: Vec<Result<f64>> = corpus
        .par_iter()
        .map(|seq| {
            let (g, loss) = sequence_loss(model, seq)?;
            Ok(g.forward(model.params(), &[])?.scalar(loss).as_f64())
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / corpus.len() as f64)
}

/// Next-token supervised fine-tuning on a token corpus.
pub fn train_sft<T: Scalar>(
    model: &mut TinyLM<T>,
    corpus: &[Vec<u32>],
    cfg: &SftConfig,
) -> Result<SftReport> {
    if corpus.is_empty() {
        return Err(Error::Empty("SFT corpus"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let n_held = ((corpus.len() as f64 * cfg.heldout_fraction).ceil() as usize)
        .min(corpus.len().saturating_sub(1));
    let (train, held) = corpus.split_at(corpus.len() - n_held);
    let held = &held[..held.len().min(cfg.heldout_cap)];
    let score = |m: &TinyLM<T>| -> Result<f64> {
        if held.is_empty() {
            Ok(f64::NAN)
        } else {
            heldout_cross_entropy(m, held)
        }
    };
    let initial = score(model)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut opt = Adam::new(cfg.optimizer, model.params());
    let mut losses = Vec::with_capacity(cfg.steps);
    let inv_b = T::one() / T::of(cfg.batch_size as f64);

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train[order[cursor]]);
            cursor += 1;
        }
        let snapshot = &*model;
        let (vals, grads) = ordered_grad_sum(model.params(), &batch, |seq| {
            let (g, loss) = sequence_loss(snapshot, seq)?;
            let v = g.forward(snapshot.params(), &[])?;
            let mut grads = snapshot.params().zeros_like();
            g.backward_into(&v, loss, inv_b, &mut grads)?;
            Ok((v.scalar(loss).as_f64(), grads))
        })
        .map_err(|e| match e {
            Error::NonFinite { .. } => Error::Divergence { step },
            other => other,
        })?;
        let loss = vals.iter().sum::<f64>() / vals.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        losses.push(loss);
        opt.step(model.params_mut(), &grads);
        if !model.params().arrays().iter().all(|a| a.all_finite()) {
            return Err(Error::Divergence { step });
        }
    }
    Ok(SftReport {
        initial_heldout_ce: initial,
        final_heldout_ce: score(model)?,
        train_losses: losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LmConfig;

    fn cfg() -> LmConfig {
        LmConfig {
            vocab: 12,
            d_model: 16,
            layers: 1,
            heads: 2,
            context: 16,
            d_ff: 16,
        }
    }

    fn corpus() -> Vec<Vec<u32>> {
        (0..40u32).map(|i| (0..6).map(|j| 3 + (i + j) % 9).collect()).collect()
    }

    #[test]
    fn zero_rate_step_is_identity() {
        let mut m = TinyLM::<f32>::init(cfg(), 1).unwrap();
        let before = m.clone();
        let c = SftConfig {
            steps: 1,
            batch_size: 4,
            optimizer: AdamConfig {
                lr: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        train_sft(&mut m, &corpus(), &c).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn deterministic_and_learns() {
        let c = SftConfig {
            steps: 60,
            batch_size: 4,
            heldout_fraction: 0.2,
            optimizer: AdamConfig {
                lr: 1e-2,
                warmup_steps: 5,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut a = TinyLM::<f32>::init(cfg(), 1).unwrap();
        let mut b = a.clone();
        let ra = train_sft(&mut a, &corpus(), &c).unwrap();
        let rb = train_sft(&mut b, &corpus(), &c).unwrap();
        assert_eq!(ra, rb);
        assert!(ra.final_heldout_ce < 0.9 * ra.initial_heldout_ce, "{ra:?}");
        assert!(train_sft(&mut a, &[], &c).is_err());
    }
}
