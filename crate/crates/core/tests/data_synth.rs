use std::collections::HashSet;

use fpo_lab::data::{gen_pref_dataset, gen_sft_corpus, read_pairs, split_pairs, write_pairs, LengthConfig, PrefRule, VOCAB};
use fpo_lab::model::vocab::{EOS, SEP};
use proptest::prelude::*;

fn lens() -> impl Strategy<Value = LengthConfig> {
    (1usize..6, 0usize..4, 2usize..8, 0usize..6).prop_map(|(pmin, pd, rmin, rd)| LengthConfig {
        prompt_min: pmin,
        prompt_max: pmin + pd,
        response_min: rmin,
        response_max: rmin + rd,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pairs_are_strictly_ordered_by_the_rule(seed in 0u64..1000, lens in lens()) {
        let rule = PrefRule::default();
        let pairs = gen_pref_dataset(seed, 40, &rule, &lens).unwrap();
        for p in &pairs {
            prop_assert!(rule.score(&p.x, &p.y_w) > rule.score(&p.x, &p.y_l));
            for y in [&p.y_w, &p.y_l] {
                prop_assert_eq!(*y.last().unwrap(), EOS);
                prop_assert!(y.iter().all(|&t| (t as usize) < VOCAB));
            }
            prop_assert_eq!(*p.x.last().unwrap(), SEP);
        }
        prop_assert_eq!(gen_pref_dataset(seed, 40, &rule, &lens).unwrap(), pairs);
    }

    #[test]
    fn pair_ids_never_collide_across_seeds(a in 0u64..1000, b in 0u64..1000) {
        prop_assume!(a != b);
        let rule = PrefRule::default();
        let lens = LengthConfig::default();
        let ids: HashSet<u64> = gen_pref_dataset(a, 30, &rule, &lens)
            .unwrap()
            .into_iter()
            .chain(gen_pref_dataset(b, 30, &rule, &lens).unwrap())
            .map(|p| p.pair_id)
            .collect();
        prop_assert_eq!(ids.len(), 60);
    }

    #[test]
    fn corpus_sequences_are_well_formed(seed in 0u64..1000) {
        let corpus = gen_sft_corpus(seed, 50, &LengthConfig::default()).unwrap();
        for s in &corpus {
            prop_assert_eq!(s.iter().filter(|&&t| t == SEP).count(), 1);
            prop_assert_eq!(*s.last().unwrap(), EOS);
        }
    }
}

#[test]
fn pairs_survive_a_jsonl_round_trip_and_split() {
    let pairs = gen_pref_dataset(3, 50, &PrefRule::default(), &LengthConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.jsonl");
    write_pairs(&path, &pairs).unwrap();
    assert_eq!(read_pairs(&path).unwrap(), pairs);
    let (train, held) = split_pairs(&pairs, 10).unwrap();
    assert_eq!((train.len(), held.len()), (40, 10));
    let mut dup = pairs.clone();
    dup.push(pairs[0].clone());
    assert!(split_pairs(&dup, 5).is_err());
}
