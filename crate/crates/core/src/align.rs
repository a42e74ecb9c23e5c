//! Preference alignment loop shared by every method.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::data::PreferencePair;
use crate::error::{Error, Result};
use crate::losses::{batch_loss, LossConfig, LossContext};
use crate::model::TinyLM;
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub loss: LossConfig,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Shuffle seed.
    pub seed: u64,
    /// Evaluation cadence in optimizer steps; 0 evaluates only at the
    /// start and the end.
    pub eval_every: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            optimizer: AdamConfig {
                lr: 5e-5,
                warmup_steps: 150,
                ..Default::default()
            },
            batch_size: 32,
            epochs: 1,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl AlignConfig {
    pub fn total_steps(&self, pairs: usize) -> usize {
        self.epochs * pairs.div_ceil(self.batch_size.max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignStep {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    pub steps: Vec<AlignStep>,
    /// Steps at which the evaluation hook ran, in order.
    pub eval_steps: Vec<usize>,
}

/// Aligns `policy` on `pairs`, calling `on_eval(step, policy)` before the
/// first update, every `eval_every` updates and after the last one.
///
/// Non-finite losses or parameters stop the run with
/// [`Error::Divergence`].
pub fn align<T: Scalar>(
    policy: &mut TinyLM<T>,
    pairs: &[PreferencePair],
    ctx: &LossContext<'_, T>,
    cfg: &AlignConfig,
    mut on_eval: impl FnMut(usize, &TinyLM<T>) -> Result<()>,
) -> Result<AlignReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("alignment pairs"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("batch_size and epochs must be positive".into()));
    }
    cfg.loss.validate()?;
    let total = cfg.total_steps(pairs.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.optimizer, policy.params());
    let mut report = AlignReport::default();
    let mut order: Vec<usize> = (0..pairs.len()).collect();

    on_eval(0, policy)?;
    report.eval_steps.push(0);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PreferencePair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let (breakdown, grads) = batch_loss(policy, &batch, ctx, &cfg.loss).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Divergence { step },
                other => other,
            })?;
            if !breakdown.loss.is_finite() {
                return Err(Error::Divergence { step });
            }
            let lr = cfg.optimizer.lr_at(opt.steps_taken());
            let grad_norm = opt.step(policy.params_mut(), &grads);
            if !grad_norm.is_finite() || !policy.params().arrays().iter().all(|a| a.all_finite()) {
                return Err(Error::Divergence { step });
            }
            step += 1;
            report.steps.push(AlignStep {
                step,
                loss: breakdown.loss,
                grad_norm,
                lr,
            });
            let due = cfg.eval_every > 0 && step % cfg.eval_every == 0;
            if due || step == total {
                on_eval(step, policy)?;
                report.eval_steps.push(step);
            }
        }
    }
    Ok(report)
}
