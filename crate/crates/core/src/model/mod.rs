//! Tiny decoder-only transformer.
//!
//! Pre-norm blocks (RMS norm with learned gain), multi-head causal
//! attention, a ReLU MLP, learned positional table and an untied output
//! projection `W_out` (`d × V`). Hidden states can be tapped after any
//! block ("residual") or at the MLP output before the residual add
//! ("mlp-out").

mod checkpoint;
pub(crate) mod sample;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, NodeId, ParamId, ParamSet, Scalar};
use crate::error::{Error, Result};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use sample::{sample, sample_token};
pub use train::{heldout_cross_entropy, train_sft, SftConfig, SftReport};

/// Reserved token ids shared by the model and the data generators.
pub mod vocab {
    pub const BOS: u32 = 0;
    pub const SEP: u32 = 1;
    pub const EOS: u32 = 2;
    /// First id available for content tokens.
    pub const FIRST_CONTENT: u32 = 3;
}

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub d_ff: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            d_model: 64,
            layers: 4,
            heads: 4,
            context: 128,
            d_ff: 256,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 4 {
            return Err(Error::Config(format!("vocab {} < 4", self.vocab)));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.context == 0 || self.d_ff == 0 {
            return Err(Error::Config("layers, context and d_ff must be positive".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (v, d, f) = (self.vocab, self.d_model, self.d_ff);
        v * d + self.context * d + self.layers * (2 * d + 4 * d * d + 2 * d * f) + d + d * v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TapKind {
    /// Residual stream after the block.
    Residual,
    /// MLP output before it is added to the residual stream.
    MlpOut,
}

impl TapKind {
    pub fn code(self) -> u8 {
        match self {
            TapKind::Residual => 0,
            TapKind::MlpOut => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(TapKind::Residual),
            1 => Some(TapKind::MlpOut),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TapKind::Residual => "residual",
            TapKind::MlpOut => "mlp-out",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tap {
    pub layer: usize,
    pub kind: TapKind,
}

impl Tap {
    pub fn residual(layer: usize) -> Self {
        Self {
            layer,
            kind: TapKind::Residual,
        }
    }

    pub fn mlp_out(layer: usize) -> Self {
        Self {
            layer,
            kind: TapKind::MlpOut,
        }
    }
}

/// Per-position logits and tapped hidden states of one sequence.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    /// `[T, V]`
    pub logits: Array<T>,
    /// `[T, d]` per requested tap, in request order.
    pub taps: Vec<(Tap, Array<T>)>,
}

/// Parameter leaves of one model inside one graph.
#[derive(Clone, Debug)]
pub struct LmLeaves {
    nodes: Vec<NodeId>,
}

/// Nodes produced by [`TinyLM::build`].
#[derive(Clone, Debug)]
pub struct LmNodes {
    /// `[T, V]`
    pub logits: NodeId,
    /// Input to the output projection, `[T, d]`.
    pub final_hidden: NodeId,
    pub taps: Vec<NodeId>,
}

/// Nodes for the response part of `[x, y]`.
#[derive(Clone, Debug)]
pub struct ResponseNodes {
    /// Log-softmax rows at the positions predicting `y`, `[|y|, V]`.
    pub log_probs: NodeId,
    /// `log π(y_t | x, y_<t)`, `[|y|]`.
    pub token_logprobs: NodeId,
    /// Scalar sum of `token_logprobs`.
    pub logprob_sum: NodeId,
    /// Tapped hidden rows at the positions predicting `y`, `[|y|, d]`.
    pub taps: Vec<NodeId>,
    pub len: usize,
}

const PER_LAYER: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct TinyLM<T> {
    config: LmConfig,
    params: ParamSet<T>,
}

/// Model input for scoring `y` after `x`: `[BOS, x.., y..]` without the
/// final response token, plus the first row whose prediction is `y_0`.
pub fn response_input(x: &[u32], y: &[u32]) -> Result<(Vec<u32>, usize)> {
    if y.is_empty() {
        return Err(Error::Empty("response"));
    }
    let mut tokens = Vec::with_capacity(x.len() + y.len());
    tokens.push(vocab::BOS);
    tokens.extend_from_slice(x);
    tokens.extend_from_slice(&y[..y.len() - 1]);
    Ok((tokens, x.len()))
}

impl<T: Scalar> TinyLM<T> {
    /// Zero-initialized model: every logit is zero, so the predictive
    /// distribution is uniform.
    pub fn zeros(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let (v, d, f) = (config.vocab, config.d_model, config.d_ff);
        let mut params = ParamSet::new();
        params.add("tok_emb", Array::zeros(&[v, d]));
        params.add("pos_emb", Array::zeros(&[config.context, d]));
        for l in 0..config.layers {
            params.add(format!("layers.{l}.attn_norm"), Array::zeros(&[d]));
            params.add(format!("layers.{l}.w_qkv"), Array::zeros(&[d, 3 * d]));
            params.add(format!("layers.{l}.w_o"), Array::zeros(&[d, d]));
            params.add(format!("layers.{l}.mlp_norm"), Array::zeros(&[d]));
            params.add(format!("layers.{l}.w_fc"), Array::zeros(&[d, f]));
            params.add(format!("layers.{l}.w_proj"), Array::zeros(&[f, d]));
        }
        params.add("final_norm", Array::zeros(&[d]));
        params.add("w_out", Array::zeros(&[d, v]));
        Ok(Self { config, params })
    }

    /// Random initialization with unit norm gains.
    pub fn init(config: LmConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model as f64;
        let resid_scale = 1.0 / (2.0 * config.layers as f64).sqrt();
        let ids: Vec<ParamId> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let arr = model.params.get_mut(id);
            let std = if name.ends_with("norm") {
                arr.data_mut().iter_mut().for_each(|x| *x = T::one());
                continue;
            } else if name.ends_with("emb") {
                0.5
            } else if name.ends_with("w_o") {
                resid_scale / d.sqrt()
            } else if name.ends_with("w_proj") {
                resid_scale / (config.d_ff as f64).sqrt()
            } else {
                1.0 / d.sqrt()
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            for x in arr.data_mut() {
                *x = T::of(normal.sample(&mut rng));
            }
        }
        Ok(model)
    }

    pub fn from_params(config: LmConfig, params: ParamSet<T>) -> Result<Self> {
        let reference = Self::zeros(config)?;
        if reference.params.len() != params.len()
            || reference
                .params
                .arrays()
                .iter()
                .zip(params.arrays())
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Config("parameter layout does not match config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> TinyLM<U> {
        TinyLM {
            config: self.config,
            params: self.params.cast(),
        }
    }

    /// Output projection `W_out`, `[d, V]`.
    pub fn w_out(&self) -> &Array<T> {
        self.params.get(ParamId(self.params.len() - 1))
    }

    /// Logits for final hidden rows: `h · W_out`.
    pub fn logits_from_hidden(&self, hidden: &Array<T>) -> Result<Array<T>> {
        hidden.matmul(self.w_out())
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: self.config.vocab,
            });
        }
        if tokens.len() > self.config.context {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                context: self.config.context,
            });
        }
        Ok(())
    }

    fn check_taps(&self, taps: &[Tap]) -> Result<()> {
        if let Some(t) = taps.iter().find(|t| t.layer >= self.config.layers) {
            return Err(Error::Config(format!(
                "tap layer {} out of range for {} layers",
                t.layer, self.config.layers
            )));
        }
        Ok(())
    }

    /// Adds this model's parameters as leaves of `g`.
    pub fn leaves(&self, g: &mut Graph<T>) -> LmLeaves {
        LmLeaves {
            nodes: self.params.ids().map(|id| g.param(&self.params, id)).collect(),
        }
    }

    /// Appends the forward computation for `tokens` to `g`.
    pub fn build(
        &self,
        g: &mut Graph<T>,
        leaves: &LmLeaves,
        tokens: &[u32],
        taps: &[Tap],
    ) -> Result<LmNodes> {
        self.check_tokens(tokens)?;
        self.check_taps(taps)?;
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        let c = &self.config;
        let p = &leaves.nodes;
        let n = tokens.len();
        let (d, dh) = (c.d_model, c.d_model / c.heads);
        let eps = T::of(NORM_EPS);
        let attn_scale = T::of(1.0 / (dh as f64).sqrt());

        let tok = g.embed(p[0], tokens.iter().map(|&t| t as usize).collect())?;
        let pos = g.embed(p[1], (0..n).collect())?;
        let mut x = g.add(tok, pos)?;
        let mut tap_nodes = vec![None; taps.len()];

        for l in 0..c.layers {
            let base = 2 + PER_LAYER * l;
            let normed = g.rms_norm(x, eps)?;
            let h = g.mul_row(normed, p[base])?;
            let qkv = g.matmul(h, p[base + 1])?;
            let mut heads = Vec::with_capacity(c.heads);
            for hd in 0..c.heads {
                let q = g.slice_cols(qkv, hd * dh, (hd + 1) * dh)?;
                let k = g.slice_cols(qkv, d + hd * dh, d + (hd + 1) * dh)?;
                let v = g.slice_cols(qkv, 2 * d + hd * dh, 2 * d + (hd + 1) * dh)?;
                let scores = g.matmul_nt(q, k)?;
                let scores = g.scale(scores, attn_scale)?;
                let att = g.causal_softmax(scores)?;
                heads.push(g.matmul(att, v)?);
            }
            let cat = g.concat_cols(&heads)?;
            let att_out = g.matmul(cat, p[base + 2])?;
            x = g.add(x, att_out)?;

            let normed = g.rms_norm(x, eps)?;
            let h = g.mul_row(normed, p[base + 3])?;
            let fc = g.matmul(h, p[base + 4])?;
            let act = g.relu(fc)?;
            let mlp = g.matmul(act, p[base + 5])?;
            x = g.add(x, mlp)?;

            for (slot, tap) in tap_nodes.iter_mut().zip(taps) {
                if tap.layer == l {
                    *slot = Some(match tap.kind {
                        TapKind::Residual => x,
                        TapKind::MlpOut => mlp,
                    });
                }
            }
        }
        let last = p.len();
        let normed = g.rms_norm(x, eps)?;
        let final_hidden = g.mul_row(normed, p[last - 2])?;
        let logits = g.matmul(final_hidden, p[last - 1])?;
        Ok(LmNodes {
            logits,
            final_hidden,
            taps: tap_nodes.into_iter().map(|t| t.expect("validated tap")).collect(),
        })
    }

    /// Appends scoring of response `y` after prompt `x`.
    pub fn build_response(
        &self,
        g: &mut Graph<T>,
        leaves: &LmLeaves,
        x: &[u32],
        y: &[u32],
        taps: &[Tap],
    ) -> Result<ResponseNodes> {
        self.check_tokens(y)?;
        let (tokens, start) = response_input(x, y)?;
        let nodes = self.build(g, leaves, &tokens, taps)?;
        let end = start + y.len();
        let logits = g.slice_rows(nodes.logits, start, end)?;
        let log_probs = g.log_softmax(logits)?;
        let token_logprobs = g.pick_cols(log_probs, y.iter().map(|&t| t as usize).collect())?;
        let logprob_sum = g.sum(token_logprobs)?;
        let taps = nodes
            .taps
            .iter()
            .map(|&t| g.slice_rows(t, start, end))
            .collect::<Result<Vec<_>>>()?;
        Ok(ResponseNodes {
            log_probs,
            token_logprobs,
            logprob_sum,
            taps,
            len: y.len(),
        })
    }

    pub fn forward(&self, tokens: &[u32], taps: &[Tap]) -> Result<ForwardTrace<T>> {
        let mut g = Graph::new();
        let leaves = self.leaves(&mut g);
        let nodes = self.build(&mut g, &leaves, tokens, taps)?;
        let v = g.forward(&self.params, &[])?;
        Ok(ForwardTrace {
            logits: v.get(nodes.logits).clone(),
            taps: taps
                .iter()
                .zip(&nodes.taps)
                .map(|(t, &n)| (*t, v.get(n).clone()))
                .collect(),
        })
    }

    /// `log π(y_t | [x, y_<t])` for every response position.
    pub fn per_token_logprobs(&self, x: &[u32], y: &[u32]) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let leaves = self.leaves(&mut g);
        let r = self.build_response(&mut g, &leaves, x, y, &[])?;
        let v = g.forward(&self.params, &[])?;
        Ok(v.get(r.token_logprobs).data().to_vec())
    }

    /// Sum of response log-probabilities, divided by `|y|` when `normalize`.
    pub fn seq_logprob(&self, x: &[u32], y: &[u32], normalize: bool) -> Result<T> {
        let total: T = self.per_token_logprobs(x, y)?.into_iter().sum();
        Ok(if normalize {
            total / T::of(y.len() as f64)
        } else {
            total
        })
    }

    /// Response-position distributions and tapped hidden rows in one pass.
    pub fn response_trace(&self, x: &[u32], y: &[u32], taps: &[Tap]) -> Result<ResponseTrace<T>> {
        let mut g = Graph::new();
        let leaves = self.leaves(&mut g);
        let r = self.build_response(&mut g, &leaves, x, y, taps)?;
        let v = g.forward(&self.params, &[])?;
        Ok(ResponseTrace {
            log_probs: v.get(r.log_probs).clone(),
            token_logprobs: v.get(r.token_logprobs).data().to_vec(),
            taps: r.taps.iter().map(|&n| v.get(n).clone()).collect(),
        })
    }
}

/// Values of [`ResponseNodes`] for a frozen model.
#[derive(Clone, Debug)]
pub struct ResponseTrace<T> {
    /// `[|y|, V]`
    pub log_probs: Array<T>,
    pub token_logprobs: Vec<T>,
    /// `[|y|, d]` per tap.
    pub taps: Vec<Array<T>>,
}

impl<T: Scalar> ResponseTrace<T> {
    pub fn logprob_sum(&self) -> T {
        self.token_logprobs.iter().copied().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> LmConfig {
        LmConfig {
            vocab: 16,
            d_model: 16,
            layers: 2,
            heads: 2,
            context: 32,
            d_ff: 32,
        }
    }

    #[test]
    fn zero_model_has_zero_logits() {
        let m = TinyLM::<f64>::zeros(small()).unwrap();
        let t = m.forward(&[0, 3, 4, 5], &[]).unwrap();
        assert!(t.logits.data().iter().all(|&x| x == 0.0));
        assert_eq!(t.logits.shape(), &[4, 16]);
    }

    #[test]
    fn tap_shape() {
        let m = TinyLM::<f64>::init(small(), 1).unwrap();
        let t = m
            .forward(&[0, 3, 4, 5, 6, 7, 8], &[Tap::residual(1), Tap::mlp_out(0)])
            .unwrap();
        assert_eq!(t.taps[0].1.shape(), &[7, 16]);
        assert_eq!(t.taps[1].1.shape(), &[7, 16]);
    }

    #[test]
    fn uniform_sequence_logprob() {
        let m = TinyLM::<f64>::zeros(small()).unwrap();
        let y = [3, 4, 5, 6, 7];
        let lp = m.seq_logprob(&[8, 9], &y, false).unwrap();
        assert!((lp - 5.0 * (1.0f64 / 16.0).ln()).abs() < 1e-12);
        assert!((lp + 13.8629).abs() < 1e-4);
        let norm = m.seq_logprob(&[8, 9], &y, true).unwrap();
        assert!((norm + 2.7726).abs() < 1e-4);
        let norm3 = m.seq_logprob(&[8, 9], &y[..3], true).unwrap();
        assert!((norm - norm3).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = TinyLM::<f64>::zeros(small()).unwrap();
        assert!(matches!(
            m.forward(&[0, 16], &[]),
            Err(Error::TokenOutOfRange { token: 16, .. })
        ));
        assert!(matches!(m.seq_logprob(&[3], &[], false), Err(Error::Empty(_))));
        assert!(m.forward(&[0], &[Tap::residual(2)]).is_err());
        let bad = LmConfig { heads: 3, ..small() };
        assert!(TinyLM::<f64>::zeros(bad).is_err());
    }

    #[test]
    fn param_count_matches_layout() {
        let c = small();
        let m = TinyLM::<f32>::zeros(c).unwrap();
        assert_eq!(m.params().element_count(), c.param_count());
    }
}
