use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{vocab, TinyLM};
use crate::autodiff::{softmax_in_place, Scalar};
use crate::error::{Error, Result};

/// Draws one token from `softmax(logits / temperature)`.
///
/// `temperature == 0` selects the argmax (first index on ties).
pub fn sample_token<T: Scalar, R: Rng + ?Sized>(
    logits: &[T],
    temperature: f64,
    rng: &mut R,
) -> Result<u32> {
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::Contract(format!(
            "temperature must be positive (or 0 for greedy), got {temperature}"
        )));
    }
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        return Ok(best as u32);
    }
    let mut probs: Vec<f64> = logits.iter().map(|l| l.as_f64() / temperature).collect();
    softmax_in_place(&mut probs);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i as u32);
        }
    }
    Ok((probs.len() - 1) as u32)
}

/// One generated continuation plus the predictive entropy (temperature 1,
/// nats) of the model at every generated position.
#[derive(Clone, Debug)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub entropies: Vec<f64>,
}

pub(crate) fn generate<T: Scalar>(
    model: &TinyLM<T>,
    x: &[u32],
    temperature: f64,
    max_len: usize,
    seed: u64,
) -> Result<Generation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = Vec::with_capacity(1 + x.len() + max_len);
    tokens.push(vocab::BOS);
    tokens.extend_from_slice(x);
    let mut out = Generation {
        tokens: Vec::new(),
        entropies: Vec::new(),
    };
    while out.tokens.len() < max_len && tokens.len() < model.config().context {
        let trace = model.forward(&tokens, &[])?;
        let last = trace.logits.row(trace.logits.rows() - 1);
        let mut p: Vec<f64> = last.iter().map(|l| l.as_f64()).collect();
        softmax_in_place(&mut p);
        out.entropies
            .push(-p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>());
        let next = sample_token(last, temperature, &mut rng)?;
        out.tokens.push(next);
        tokens.push(next);
        if next == vocab::EOS {
            break;
        }
    }
    Ok(out)
}

/// Samples a continuation of `x`, stopping after EOS or `max_len` tokens.
/// Deterministic given `seed`.
pub fn sample<T: Scalar>(
    model: &TinyLM<T>,
    x: &[u32],
    temperature: f64,
    max_len: usize,
    seed: u64,
) -> Result<Vec<u32>> {
    Ok(generate(model, x, temperature, max_len, seed)?.tokens)
}
