//! Synthetic corpora: an SFT sequence corpus from a small probabilistic
//! grammar and preference pairs ordered by a known rule.
//!
//! A sequence is `prompt, SEP, response, EOS`. Prompts and responses walk
//! a topic-specific Markov chain over content tokens; responses also carry
//! a designated motif at a per-sequence rate. The grammar itself is fixed
//! (independent of the sampling seed) so every corpus speaks the same
//! language.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::vocab::{EOS, FIRST_CONTENT, SEP};

pub const VOCAB: usize = 64;
/// Bigram whose density in a response defines preference. Its tokens occur
/// nowhere else in the grammar.
pub const MOTIF: [u32; 2] = [61, 62];
const TOPICS: usize = 4;
const TOPIC_TOKENS: u32 = 14;
const GRAMMAR_SEED: u64 = 0x5eed_0f_9a11;
const MAX_RETRIES: usize = 64;

/// Lengths of generated prompts and responses (inclusive ranges).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LengthConfig {
    pub prompt_min: usize,
    pub prompt_max: usize,
    pub response_min: usize,
    pub response_max: usize,
}

impl Default for LengthConfig {
    fn default() -> Self {
        Self {
            prompt_min: 4,
            prompt_max: 8,
            response_min: 6,
            response_max: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    #[serde(with = "decimal_id")]
    pub pair_id: u64,
    pub x: Vec<u32>,
    pub y_w: Vec<u32>,
    pub y_l: Vec<u32>,
}

mod decimal_id {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(id: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&id.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Ground-truth preference rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum PrefRule {
    /// Non-overlapping occurrences of `motif` per response token.
    PatternDensity { motif: Vec<u32> },
}

impl Default for PrefRule {
    fn default() -> Self {
        PrefRule::PatternDensity {
            motif: MOTIF.to_vec(),
        }
    }
}

impl PrefRule {
    pub fn id(&self) -> &'static str {
        match self {
            PrefRule::PatternDensity { .. } => "pattern-density",
        }
    }

    pub fn score(&self, _x: &[u32], y: &[u32]) -> f64 {
        match self {
            PrefRule::PatternDensity { motif } => {
                if y.is_empty() || motif.is_empty() {
                    return 0.0;
                }
                let mut count = 0usize;
                let mut i = 0;
                while i + motif.len() <= y.len() {
                    if y[i..i + motif.len()] == motif[..] {
                        count += 1;
                        i += motif.len();
                    } else {
                        i += 1;
                    }
                }
                count as f64 / y.len() as f64
            }
        }
    }
}

/// Topic Markov chains over disjoint content-token ranges.
struct Grammar {
    /// `[topic][from][to]` cumulative transition weights.
    chains: Vec<Vec<Vec<f64>>>,
}

impl Grammar {
    fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(GRAMMAR_SEED);
        let n = TOPIC_TOKENS as usize;
        let chains = (0..TOPICS)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        // a few strong successors per state keeps the chain learnable
                        let mut w: Vec<f64> = (0..n).map(|_| 0.05 * rng.random::<f64>()).collect();
                        for _ in 0..3 {
                            w[rng.random_range(0..n)] += 1.0 + rng.random::<f64>();
                        }
                        let mut acc = 0.0;
                        w.iter()
                            .map(|x| {
                                acc += x;
                                acc
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self { chains }
    }

    fn token(topic: usize, state: usize) -> u32 {
        FIRST_CONTENT + (topic as u32) * TOPIC_TOKENS + state as u32
    }

    fn step(&self, topic: usize, state: usize, rng: &mut ChaCha8Rng) -> usize {
        let cum = &self.chains[topic][state];
        let u = rng.random::<f64>() * cum[cum.len() - 1];
        cum.iter().position(|&c| u < c).unwrap_or(cum.len() - 1)
    }

    fn prompt(&self, lens: &LengthConfig, rng: &mut ChaCha8Rng) -> (Vec<u32>, usize, usize) {
        let topic = rng.random_range(0..TOPICS);
        let len = rng.random_range(lens.prompt_min..=lens.prompt_max);
        let mut x = Vec::with_capacity(len + 1);
        let mut state = rng.random_range(0..TOPIC_TOKENS as usize);
        for _ in 0..len {
            x.push(Self::token(topic, state));
            state = self.step(topic, state, rng);
        }
        x.push(SEP);
        (x, topic, state)
    }

    fn response(
        &self,
        topic: usize,
        mut state: usize,
        motif_rate: f64,
        lens: &LengthConfig,
        rng: &mut ChaCha8Rng,
    ) -> Vec<u32> {
        let len = rng.random_range(lens.response_min..=lens.response_max);
        let mut y = Vec::with_capacity(len + 1);
        while y.len() < len {
            if y.len() + 2 <= len && rng.random::<f64>() < motif_rate {
                y.extend_from_slice(&MOTIF);
            } else {
                y.push(Self::token(topic, state));
                state = self.step(topic, state, rng);
            }
        }
        y.push(EOS);
        y
    }
}

fn check_lengths(lens: &LengthConfig) -> Result<()> {
    if lens.prompt_min == 0
        || lens.prompt_min > lens.prompt_max
        || lens.response_min < 2
        || lens.response_min > lens.response_max
    {
        return Err(Error::Config(format!("invalid length ranges {lens:?}")));
    }
    Ok(())
}

/// `size` sequences `prompt, SEP, response, EOS`, deterministic per seed.
pub fn gen_sft_corpus(seed: u64, size: usize, lens: &LengthConfig) -> Result<Vec<Vec<u32>>> {
    if size == 0 {
        return Err(Error::Empty("SFT corpus size"));
    }
    check_lengths(lens)?;
    let grammar = Grammar::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..size)
        .map(|_| {
            let (mut seq, topic, state) = grammar.prompt(lens, &mut rng);
            let rate = 0.25 * rng.random::<f64>();
            seq.extend(grammar.response(topic, state, rate, lens, &mut rng));
            seq
        })
        .collect())
}

/// Preference pairs over grammar prompts. Both responses are sampled
/// independently (lengths included); the one the rule scores higher is
/// chosen, ties are resampled.
pub fn gen_pref_dataset(
    seed: u64,
    size: usize,
    rule: &PrefRule,
    lens: &LengthConfig,
) -> Result<Vec<PreferencePair>> {
    check_lengths(lens)?;
    if size as u64 > u32::MAX as u64 {
        return Err(Error::Config("at most 2^32 pairs per seed".into()));
    }
    let grammar = Grammar::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut pairs = Vec::with_capacity(size);
    for i in 0..size {
        let (x, topic, state) = grammar.prompt(lens, &mut rng);
        let mut found = None;
        for _ in 0..MAX_RETRIES {
            let a = grammar.response(topic, state, 0.3 * rng.random::<f64>(), lens, &mut rng);
            let b = grammar.response(topic, state, 0.3 * rng.random::<f64>(), lens, &mut rng);
            let (sa, sb) = (rule.score(&x, &a), rule.score(&x, &b));
            if sa != sb && a != b {
                found = Some(if sa > sb { (a, b) } else { (b, a) });
                break;
            }
        }
        let (y_w, y_l) = found.ok_or_else(|| {
            Error::Generation(format!("pair {i}: no strictly ordered responses in {MAX_RETRIES} tries"))
        })?;
        pairs.push(PreferencePair {
            pair_id: pair_id(seed, i as u64),
            x,
            y_w,
            y_l,
        });
    }
    Ok(pairs)
}

/// Low 32 bits of the seed in the high half, index in the low half.
pub fn pair_id(seed: u64, index: u64) -> u64 {
    (seed & 0xffff_ffff) << 32 | (index & 0xffff_ffff)
}

/// Splits off the last `heldout` pairs. Errors if any pair id repeats.
pub fn split_pairs(
    pairs: &[PreferencePair],
    heldout: usize,
) -> Result<(Vec<PreferencePair>, Vec<PreferencePair>)> {
    let mut seen = HashSet::with_capacity(pairs.len());
    for p in pairs {
        if !seen.insert(p.pair_id) {
            return Err(Error::Config(format!("duplicate pair id {}", p.pair_id)));
        }
    }
    let cut = pairs.len().saturating_sub(heldout);
    Ok((pairs[..cut].to_vec(), pairs[cut..].to_vec()))
}

/// Empirical unigram entropy of a corpus in nats.
pub fn unigram_entropy(corpus: &[Vec<u32>]) -> f64 {
    let mut counts = [0usize; VOCAB];
    let mut total = 0usize;
    for &t in corpus.iter().flatten() {
        counts[(t as usize).min(VOCAB - 1)] += 1;
        total += 1;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceRecord {
    tokens: Vec<u32>,
}

fn write_lines<I: Serialize>(path: &Path, items: &[I]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    crate::io::write_file(path, &buf)
}

fn read_lines<I: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<I>> {
    let bytes = crate::io::read_file(path)?;
    let mut out = Vec::new();
    for (n, line) in bytes.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            kind: "dataset",
            detail: format!("{}:{}: {e}", path.display(), n + 1),
        })?);
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, corpus: &[Vec<u32>]) -> Result<()> {
    let records: Vec<SequenceRecord> = corpus
        .iter()
        .map(|t| SequenceRecord { tokens: t.clone() })
        .collect();
    write_lines(path, &records)
}

pub fn read_corpus(path: &Path) -> Result<Vec<Vec<u32>>> {
    Ok(read_lines::<SequenceRecord>(path)?
        .into_iter()
        .map(|r| r.tokens)
        .collect())
}

pub fn write_pairs(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    write_lines(path, pairs)
}

pub fn read_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    read_lines(path)
}
