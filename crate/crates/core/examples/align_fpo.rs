//! Aligns a policy with FPO against the offline cache and prints the
//! training log.

use fpo_lab::align::{align, AlignConfig};
use fpo_lab::cache::precompute;
use fpo_lab::data::{gen_pref_dataset, LengthConfig, PrefRule};
use fpo_lab::eval::pref_accuracy;
use fpo_lab::losses::{LossConfig, LossContext, Method};
use fpo_lab::model::{LmConfig, Tap, TinyLM};
use fpo_lab::optim::AdamConfig;
use fpo_lab::sae::{PoolingMode, SparseAutoencoder};

fn main() -> fpo_lab::Result<()> {
    let lm = LmConfig {
        d_model: 16,
        layers: 2,
        heads: 2,
        d_ff: 32,
        ..LmConfig::default()
    };
    let reference = TinyLM::<f32>::init(lm, 0)?;
    let sae = SparseAutoencoder::<f32>::init(16, 64, 0.0, 2)?;
    let pairs = gen_pref_dataset(3, 96, &PrefRule::default(), &LengthConfig::default())?;
    let tap = Tap::residual(1);
    let cache = precompute(&pairs, &reference, &sae, tap, PoolingMode::Mean, 8)?;
    let cfg = AlignConfig {
        loss: LossConfig {
            k: 8,
            tap,
            ..LossConfig::for_method(Method::Fpo)
        },
        optimizer: AdamConfig {
            lr: 1e-3,
            warmup_steps: 2,
            ..AdamConfig::default()
        },
        batch_size: 8,
        epochs: 2,
        eval_every: 6,
        ..AlignConfig::default()
    };

    let mut policy = reference.clone();
    let ctx = LossContext::cached(&sae, &cache);
    let report = align(&mut policy, &pairs, &ctx, &cfg, |step, p| {
        println!("step {step:>3}: train accuracy {:.3}", pref_accuracy(p, &pairs, true)?);
        Ok(())
    })?;
    for s in report.steps.iter().step_by(4) {
        println!("  step {:>3} loss {:.5} grad norm {:.4} lr {:.2e}", s.step, s.loss, s.grad_norm, s.lr);
    }
    Ok(())
}
