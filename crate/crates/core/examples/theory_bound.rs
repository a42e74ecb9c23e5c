//! Checks the KL-vs-feature-MSE bound on random perturbations of an
//! exact dictionary, at several perturbation scales.

use fpo_lab::model::{LmConfig, TinyLM};
use fpo_lab::sae::SparseAutoencoder;
use fpo_lab::theory::{kl_mse_bound_check, scale_sweep};

fn main() -> fpo_lab::Result<()> {
    let model = TinyLM::<f64>::init(LmConfig::default(), 0)?;
    let sae = SparseAutoencoder::<f64>::exact_reconstruction(model.config().d_model)?;
    let r = kl_mse_bound_check(&model, &sae, 1000, 1e-3, 1)?;
    println!(
        "M = {:.4}: {} / {} violations, worst ratio {:.4}, linearization error {:.2e}",
        r.operator_norm, r.violations, r.trials, r.max_ratio, r.linearization_max_error
    );
    for r in scale_sweep(&model, &sae, 300, &[1e-3, 1e-2, 1e-1, 1.0], 2)? {
        println!("  scale {:>6}: {} violations, worst ratio {:.4}", r.scale, r.violations, r.max_ratio);
    }
    Ok(())
}
