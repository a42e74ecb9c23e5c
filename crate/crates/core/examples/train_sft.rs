//! Supervised fine-tuning of a small model on the synthetic corpus.

use fpo_lab::data::{gen_sft_corpus, LengthConfig};
use fpo_lab::model::{train_sft, LmConfig, SftConfig, TinyLM};

fn main() -> fpo_lab::Result<()> {
    let corpus = gen_sft_corpus(0, 600, &LengthConfig::default())?;
    let cfg = LmConfig {
        d_model: 32,
        layers: 2,
        heads: 2,
        d_ff: 64,
        ..LmConfig::default()
    };
    let mut model = TinyLM::<f32>::init(cfg, 0)?;
    let report = train_sft(
        &mut model,
        &corpus,
        &SftConfig {
            steps: 150,
            ..SftConfig::default()
        },
    )?;
    println!(
        "held-out cross-entropy {:.3} -> {:.3} over {} steps",
        report.initial_heldout_ce,
        report.final_heldout_ce,
        report.train_losses.len()
    );
    Ok(())
}
