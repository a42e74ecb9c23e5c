//! Trains a sparse autoencoder on residual activations and reports its
//! sparsity.

use fpo_lab::data::{gen_sft_corpus, LengthConfig};
use fpo_lab::model::{LmConfig, Tap, TinyLM};
use fpo_lab::sae::{collect_activations, train_sae, SaeConfig};

fn main() -> fpo_lab::Result<()> {
    let corpus = gen_sft_corpus(0, 200, &LengthConfig::default())?;
    let model = TinyLM::<f32>::init(
        LmConfig {
            d_model: 16,
            layers: 2,
            heads: 2,
            d_ff: 32,
            ..LmConfig::default()
        },
        0,
    )?;
    let acts = collect_activations(&model, &corpus, Tap::residual(1), 2000)?;
    let (sae, report) = train_sae(
        &acts,
        &SaeConfig {
            steps: 300,
            batch_size: 64,
            ..SaeConfig::default()
        },
    )?;
    println!("{} rows of width {}, dictionary size {}", acts.rows(), acts.cols(), sae.width());
    println!("reconstruction mse {:.4} -> {:.4}", report.initial_mse, report.final_mse);
    println!(
        "mean L0 {:.2} -> {:.2}, top-{} mass {:.3}",
        report.initial.mean_l0, report.last.mean_l0, report.last.top_n, report.last.top_mass
    );
    Ok(())
}
