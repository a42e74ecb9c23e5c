//! Generates an SFT corpus and a preference set and prints a few pairs.

use fpo_lab::data::{gen_pref_dataset, gen_sft_corpus, split_pairs, unigram_entropy, LengthConfig, PrefRule};

fn main() -> fpo_lab::Result<()> {
    let lens = LengthConfig::default();
    let rule = PrefRule::default();
    let corpus = gen_sft_corpus(0, 500, &lens)?;
    let pairs = gen_pref_dataset(1, 40, &rule, &lens)?;
    let (train, heldout) = split_pairs(&pairs, 10)?;
    println!(
        "{} corpus sequences, unigram entropy {:.3} nats; {} train / {} held-out pairs",
        corpus.len(),
        unigram_entropy(&corpus),
        train.len(),
        heldout.len()
    );
    for p in pairs.iter().take(3) {
        println!(
            "pair {:016x}: x {:?}\n  chosen   {:?} (score {:.2})\n  rejected {:?} (score {:.2})",
            p.pair_id,
            p.x,
            p.y_w,
            rule.score(&p.x, &p.y_w),
            p.y_l,
            rule.score(&p.x, &p.y_l)
        );
    }
    Ok(())
}
