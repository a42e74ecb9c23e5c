//! Every loss on the same batch, split into its `u = lpd − margin − δ`
//! terms.

use fpo_lab::cache::precompute;
use fpo_lab::data::{gen_pref_dataset, LengthConfig, PrefRule};
use fpo_lab::losses::{batch_loss, LossConfig, LossContext, Method};
use fpo_lab::model::{LmConfig, Tap, TinyLM};
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
    let policy = TinyLM::<f32>::init(lm, 1)?;
    let sae = SparseAutoencoder::<f32>::init(16, 64, 0.0, 2)?;
    let pairs = gen_pref_dataset(3, 8, &PrefRule::default(), &LengthConfig::default())?;
    let tap = Tap::residual(1);
    let cache = precompute(&pairs, &reference, &sae, tap, PoolingMode::Mean, 8)?;

    println!("{:<9} {:>8} {:>9} {:>9} {:>9}", "method", "loss", "lpd", "margin", "delta");
    for method in Method::ALL {
        let cfg = LossConfig {
            k: 8,
            tap,
            ..LossConfig::for_method(method)
        };
        let ctx = match method {
            Method::Fpo => LossContext::cached(&sae, &cache),
            _ => LossContext::live(&reference),
        };
        let (b, grads) = batch_loss(&policy, &pairs, &ctx, &cfg)?;
        let mean = |f: fn(&fpo_lab::losses::PairTerms) -> f64| b.pairs.iter().map(f).sum::<f64>() / b.pairs.len() as f64;
        let gnorm: f64 = grads.arrays().iter().map(|a| a.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>()).sum::<f64>().sqrt();
        println!(
            "{:<9} {:>8.5} {:>9.5} {:>9.5} {:>9.5}  |grad| {gnorm:.4}",
            method.as_str(),
            b.loss,
            mean(|t| t.lpd),
            mean(|t| t.margin),
            mean(|t| t.delta)
        );
    }
    Ok(())
}
