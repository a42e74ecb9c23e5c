//! Preference losses in one decomposition.
//!
//! Every method scores a pair as `u = LPD − margin − δ` and the batch loss
//! is the mean of `−log σ(u)`:
//!
//! | method     | LPD                  | margin          | δ                          |
//! |------------|----------------------|-----------------|----------------------------|
//! | `dpo`      | `β·Δ log π_θ`        | `β·Δ log π_ref` | 0                          |
//! | `simpo`    | `β·Δ (log π_θ/|y|)`  | `γ`             | 0                          |
//! | `tdpo1`    | `β·Δ log π_θ`        | `β·Δ log π_ref` | `β(KL_l − KL_w)`           |
//! | `tdpo2`    | `β·Δ log π_θ`        | `β·Δ log π_ref` | `α(β·KL_l − sg(β·KL_w))`   |
//! | `simpo-kl` | `β·Δ (log π_θ/|y|)`  | `γ`             | `α(β·KL_l − sg(β·KL_w))`   |
//! | `fpo`      | `β·Δ (log π_θ/|y|)`  | `β·Δ (log π_ref/|y|)` | `α(β·D_l − sg(β·D_w))` |
//!
//! `Δ` is chosen minus rejected, `KL` the sequential KL from reference to
//! policy over response positions, and `D` the feature-level discrepancy
//! of pooled SAE activations on the union of top-k indices. Reference
//! quantities never carry gradient.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Gradients, Graph, NodeId, Scalar};
use crate::cache::{pooled_activation, RefCache};
use crate::data::PreferencePair;
use crate::error::{Error, Result};
use crate::model::{Tap, TinyLM};
use crate::sae::{topk_indices, PoolingMode, PooledActivation, SparseAutoencoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Dpo,
    Simpo,
    Tdpo1,
    Tdpo2,
    SimpoKl,
    Fpo,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Dpo,
        Method::Simpo,
        Method::Tdpo1,
        Method::Tdpo2,
        Method::SimpoKl,
        Method::Fpo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Dpo => "dpo",
            Method::Simpo => "simpo",
            Method::Tdpo1 => "tdpo1",
            Method::Tdpo2 => "tdpo2",
            Method::SimpoKl => "simpo-kl",
            Method::Fpo => "fpo",
        }
    }

    /// Whether the method reads a live reference model during training.
    pub fn needs_reference(self) -> bool {
        matches!(
            self,
            Method::Dpo | Method::Tdpo1 | Method::Tdpo2 | Method::SimpoKl
        )
    }

    fn normalized(self) -> bool {
        matches!(self, Method::Simpo | Method::SimpoKl | Method::Fpo)
    }

    fn uses_kl(self) -> bool {
        matches!(self, Method::Tdpo1 | Method::Tdpo2 | Method::SimpoKl)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Normalizer of the feature discrepancy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Divisor {
    /// Divide by `k` regardless of the union size.
    #[default]
    K,
    /// Divide by `|I_k|`.
    UnionSize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub method: Method,
    /// Weight `α` of the constraint term (TDPO-2, SimPO+KL, FPO).
    pub alpha_constraint: f64,
    pub beta: f64,
    /// Constant SimPO margin `γ`.
    pub gamma_const: f64,
    pub k: usize,
    /// Where SAE features are read for the FPO constraint.
    pub tap: Tap,
    pub pooling: PoolingMode,
    pub stop_gradient: bool,
    /// Per-feature multipliers inside the discrepancy; all ones if absent.
    pub feature_weights: Option<Vec<f64>>,
    pub divisor: Divisor,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            method: Method::Fpo,
            alpha_constraint: 0.5,
            beta: 0.1,
            gamma_const: 0.5,
            k: 32,
            tap: Tap::residual(3),
            pooling: PoolingMode::Mean,
            stop_gradient: true,
            feature_weights: None,
            divisor: Divisor::K,
        }
    }
}

impl LossConfig {
    /// Defaults for `method`; the SimPO family uses `β = 2`.
    pub fn for_method(method: Method) -> Self {
        let beta = match method {
            Method::Simpo | Method::SimpoKl => 2.0,
            _ => 0.1,
        };
        Self {
            method,
            beta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.alpha_constraint >= 0.0) || !self.alpha_constraint.is_finite() {
            return Err(Error::Config(format!(
                "alpha_constraint must be >= 0, got {}",
                self.alpha_constraint
            )));
        }
        if !self.gamma_const.is_finite() {
            return Err(Error::Config("gamma_const must be finite".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if let Some(w) = &self.feature_weights {
            if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                return Err(Error::Config("feature_weights must be finite and >= 0".into()));
            }
        }
        Ok(())
    }
}

/// One SAE-based constraint: the tap it reads, the dictionary and,
/// optionally, the offline cache of reference activations.
#[derive(Clone, Copy, Debug)]
pub struct FeatureSource<'a, T> {
    pub tap: Tap,
    pub sae: &'a SparseAutoencoder<T>,
    pub cache: Option<&'a RefCache<T>>,
}

/// Everything a loss may read besides the policy.
///
/// FPO reads reference quantities from the feature caches when present
/// and falls back to the live reference otherwise; several features sum
/// their discrepancies (multi-layer constraint).
#[derive(Clone, Debug)]
pub struct LossContext<'a, T> {
    pub reference: Option<&'a TinyLM<T>>,
    pub features: Vec<FeatureSource<'a, T>>,
}

impl<'a, T: Scalar> LossContext<'a, T> {
    pub fn none() -> Self {
        Self {
            reference: None,
            features: Vec::new(),
        }
    }

    pub fn live(reference: &'a TinyLM<T>) -> Self {
        Self {
            reference: Some(reference),
            features: Vec::new(),
        }
    }

    /// Single-feature FPO context backed by `cache`.
    pub fn cached(sae: &'a SparseAutoencoder<T>, cache: &'a RefCache<T>) -> Self {
        Self {
            reference: None,
            features: vec![FeatureSource {
                tap: cache.header().tap,
                sae,
                cache: Some(cache),
            }],
        }
    }

    pub fn with_feature(mut self, tap: Tap, sae: &'a SparseAutoencoder<T>) -> Self {
        self.features.push(FeatureSource {
            tap,
            sae,
            cache: None,
        });
        self
    }

    fn check(&self, cfg: &LossConfig, policy: &TinyLM<T>) -> Result<()> {
        cfg.validate()?;
        let method = cfg.method;
        if method.needs_reference() && self.reference.is_none() {
            return Err(Error::Config(format!("method {method} needs a live reference model")));
        }
        if method != Method::Fpo {
            return Ok(());
        }
        if self.features.is_empty() {
            return Err(Error::Config("method fpo needs an SAE feature source".into()));
        }
        for f in &self.features {
            if f.tap.layer >= policy.config().layers {
                return Err(Error::Config(format!("tap layer {} out of range", f.tap.layer)));
            }
            if f.sae.dim() != policy.config().d_model {
                return Err(Error::Dimension {
                    expected: policy.config().d_model,
                    got: f.sae.dim(),
                });
            }
            if cfg.k > f.sae.width() {
                return Err(Error::Config(format!(
                    "k = {} exceeds SAE width {}",
                    cfg.k,
                    f.sae.width()
                )));
            }
            if let Some(w) = &cfg.feature_weights {
                if w.len() != f.sae.width() {
                    return Err(Error::Dimension {
                        expected: f.sae.width(),
                        got: w.len(),
                    });
                }
            }
            match f.cache {
                Some(c) => {
                    let h = c.header();
                    if h.tap != f.tap || h.pooling != cfg.pooling || h.k != cfg.k || h.m != f.sae.width()
                    {
                        return Err(Error::Config(format!(
                            "cache built for tap {:?}, pooling {:?}, k {}, m {} does not match the loss configuration",
                            h.tap, h.pooling, h.k, h.m
                        )));
                    }
                    let found = f.sae.checksum();
                    if found != h.sae_checksum {
                        return Err(Error::Checksum {
                            what: "SAE",
                            expected: h.sae_checksum,
                            found,
                        });
                    }
                }
                None if self.reference.is_none() => {
                    return Err(Error::Config(
                        "method fpo needs a reference cache (cache_path) or a live reference".into(),
                    ));
                }
                None => {}
            }
        }
        Ok(())
    }
}

/// Terms of one pair, `u = lpd − margin − delta`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairTerms {
    pub pair_id: u64,
    pub u: f64,
    pub lpd: f64,
    pub margin: f64,
    pub delta: f64,
    /// Unscaled constraint value on the chosen response (KL or D), 0 if
    /// the method has none.
    pub constraint_chosen: f64,
    pub constraint_rejected: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub pairs: Vec<PairTerms>,
    /// Mean over pairs of `−log σ(u)`.
    pub loss: f64,
}

/// Scalar whose parameter gradient [`evaluate`] returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    /// The batch loss.
    Loss,
    /// The sum over pairs of the constraint term `δ`.
    Delta,
}

struct RefFeature<T> {
    dense: Vec<T>,
    indices: Vec<usize>,
}

/// Reference-side constants of one pair.
struct RefSide<T> {
    logp: [T; 2],
    log_probs: Option<[Arc<Array<T>>; 2]>,
    margin: T,
    features: Vec<[RefFeature<T>; 2]>,
}

fn responses(pair: &PreferencePair) -> [&[u32]; 2] {
    [&pair.y_w, &pair.y_l]
}

fn ref_side<T: Scalar>(
    pair: &PreferencePair,
    ctx: &LossContext<'_, T>,
    cfg: &LossConfig,
) -> Result<RefSide<T>> {
    let method = cfg.method;
    let beta = T::of(cfg.beta);
    let mut side = RefSide {
        logp: [T::zero(); 2],
        log_probs: None,
        margin: T::zero(),
        features: Vec::new(),
    };
    let live_taps: Vec<Tap> = if method == Method::Fpo {
        ctx.features
            .iter()
            .filter(|f| f.cache.is_none())
            .map(|f| f.tap)
            .collect()
    } else {
        Vec::new()
    };
    let wants_live = method.needs_reference()
        || (method == Method::Fpo
            && (!live_taps.is_empty() || ctx.features.iter().all(|f| f.cache.is_none())));
    let traces = if wants_live {
        let reference = ctx
            .reference
            .ok_or_else(|| Error::Config(format!("method {method} needs a live reference model")))?;
        let tw = reference.response_trace(&pair.x, &pair.y_w, &live_taps)?;
        let tl = reference.response_trace(&pair.x, &pair.y_l, &live_taps)?;
        side.logp = [tw.logprob_sum(), tl.logprob_sum()];
        Some([tw, tl])
    } else {
        None
    };

    side.margin = match method {
        Method::Dpo | Method::Tdpo1 | Method::Tdpo2 => beta * (side.logp[0] - side.logp[1]),
        Method::Simpo | Method::SimpoKl => T::of(cfg.gamma_const),
        Method::Fpo => match ctx.features[0].cache {
            Some(c) => c.lookup(pair.pair_id)?.gamma_ref_ln(cfg.beta),
            None => {
                let (lw, ll) = (pair.y_w.len(), pair.y_l.len());
                beta / T::of(lw as f64) * side.logp[0] - beta / T::of(ll as f64) * side.logp[1]
            }
        },
    };

    if method.uses_kl() {
        let [tw, tl] = traces.as_ref().expect("live reference traced");
        side.log_probs = Some([Arc::new(tw.log_probs.clone()), Arc::new(tl.log_probs.clone())]);
    }

    if method == Method::Fpo {
        let mut live_slot = 0;
        for f in &ctx.features {
            let pairs_of: [Result<RefFeature<T>>; 2] = match f.cache {
                Some(c) => {
                    let e = c.lookup(pair.pair_id)?;
                    let m = f.sae.width();
                    [&e.chosen, &e.rejected].map(|s| {
                        Ok(RefFeature {
                            dense: PooledActivation::densify(m, s)?,
                            indices: s.iter().map(|&(i, _)| i as usize).collect(),
                        })
                    })
                }
                None => {
                    let tr = traces.as_ref().expect("live reference traced");
                    let slot = live_slot;
                    live_slot += 1;
                    [0, 1].map(|s| {
                        let acts = f.sae.encode_rows(&tr[s].taps[slot])?;
                        let pooled = crate::sae::pool(&acts, cfg.pooling)?;
                        Ok(RefFeature {
                            indices: topk_indices(&pooled.values, cfg.k)?,
                            dense: pooled.values,
                        })
                    })
                }
            };
            let [a, b] = pairs_of;
            side.features.push([a?, b?]);
        }
    }
    Ok(side)
}

struct PairNodes {
    u: NodeId,
    lpd: NodeId,
    delta: Option<NodeId>,
    constraint: Option<[NodeId; 2]>,
    loss: NodeId,
}

fn kl_node<T: Scalar>(g: &mut Graph<T>, ref_log_probs: &Arc<Array<T>>, log_probs: NodeId) -> Result<NodeId> {
    let p = Arc::new(ref_log_probs.map(T::exp));
    let pn = g.constant(p);
    let lr = g.constant(ref_log_probs.clone());
    let diff = g.sub(lr, log_probs)?;
    let prod = g.mul(pn, diff)?;
    g.sum(prod)
}

#[allow(clippy::too_many_arguments)]
fn discrepancy_node<T: Scalar>(
    g: &mut Graph<T>,
    sae: &SparseAutoencoder<T>,
    rows: NodeId,
    reference: &RefFeature<T>,
    cfg: &LossConfig,
) -> Result<NodeId> {
    let m = sae.width();
    let nodes = sae.frozen(g);
    let acts = nodes.encode(g, rows)?;
    let pooled = cfg.pooling.build(g, acts)?;
    let mask_theta = g.top_k_mask(pooled, cfg.k)?;
    let mut ref_mask = vec![T::zero(); m];
    for &i in &reference.indices {
        ref_mask[i] = T::one();
    }
    let ref_mask = g.constant(Array::vector(ref_mask));
    let mask = g.mask_union(mask_theta, ref_mask)?;
    let ref_vals = g.constant(Array::vector(reference.dense.clone()));
    let diff = g.sub(pooled, ref_vals)?;
    let sq = g.square(diff)?;
    let mut terms = g.mul(sq, mask)?;
    if let Some(w) = &cfg.feature_weights {
        let w = g.constant(Array::vector(w.iter().map(|&x| T::of(x)).collect()));
        terms = g.mul(terms, w)?;
    }
    let total = g.sum(terms)?;
    match cfg.divisor {
        Divisor::K => g.scale(total, T::one() / T::of(cfg.k as f64)),
        Divisor::UnionSize => {
            let size = g.sum(mask)?;
            g.div(total, size)
        }
    }
}

/// `α(β·c_l − sg(β·c_w))` or, for TDPO-1, `β(c_l − c_w)`.
fn delta_node<T: Scalar>(g: &mut Graph<T>, cw: NodeId, cl: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    let beta = T::of(cfg.beta);
    if cfg.method == Method::Tdpo1 {
        let d = g.sub(cl, cw)?;
        return g.scale(d, beta);
    }
    let bl = g.scale(cl, beta)?;
    let mut bw = g.scale(cw, beta)?;
    if cfg.stop_gradient {
        bw = g.stop_gradient(bw)?;
    }
    let d = g.sub(bl, bw)?;
    g.scale(d, T::of(cfg.alpha_constraint))
}

fn build_pair<T: Scalar>(
    policy: &TinyLM<T>,
    pair: &PreferencePair,
    side: &RefSide<T>,
    ctx: &LossContext<'_, T>,
    cfg: &LossConfig,
    batch: usize,
) -> Result<(Graph<T>, PairNodes)> {
    let method = cfg.method;
    let taps: Vec<Tap> = if method == Method::Fpo {
        ctx.features.iter().map(|f| f.tap).collect()
    } else {
        Vec::new()
    };
    let mut g = Graph::new();
    let leaves = policy.leaves(&mut g);
    let rw = policy.build_response(&mut g, &leaves, &pair.x, &pair.y_w, &taps)?;
    let rl = policy.build_response(&mut g, &leaves, &pair.x, &pair.y_l, &taps)?;
    let beta = T::of(cfg.beta);

    let lpd = if method.normalized() {
        let a = g.scale(rw.logprob_sum, beta / T::of(rw.len as f64))?;
        let b = g.scale(rl.logprob_sum, beta / T::of(rl.len as f64))?;
        g.sub(a, b)?
    } else {
        let d = g.sub(rw.logprob_sum, rl.logprob_sum)?;
        g.scale(d, beta)?
    };

    let constraint = if method.uses_kl() {
        let lp = side.log_probs.as_ref().expect("reference log-probs prepared");
        let kw = kl_node(&mut g, &lp[0], rw.log_probs)?;
        let kl = kl_node(&mut g, &lp[1], rl.log_probs)?;
        Some([kw, kl])
    } else if method == Method::Fpo {
        let mut sums: Option<[NodeId; 2]> = None;
        for (fi, f) in ctx.features.iter().enumerate() {
            let dw = discrepancy_node(&mut g, f.sae, rw.taps[fi], &side.features[fi][0], cfg)?;
            let dl = discrepancy_node(&mut g, f.sae, rl.taps[fi], &side.features[fi][1], cfg)?;
            sums = Some(match sums {
                None => [dw, dl],
                Some([aw, al]) => [g.add(aw, dw)?, g.add(al, dl)?],
            });
        }
        sums
    } else {
        None
    };

    let delta = match constraint {
        Some([cw, cl]) => Some(delta_node(&mut g, cw, cl, cfg)?),
        None => None,
    };
    let mut u = match delta {
        Some(d) => g.sub(lpd, d)?,
        None => g.scale(lpd, T::one())?,
    };
    u = g.offset(u, -side.margin)?;
    let ls = g.log_sigmoid(u)?;
    let loss = g.scale(ls, -T::one() / T::of(batch as f64))?;
    Ok((
        g,
        PairNodes {
            u,
            lpd,
            delta,
            constraint,
            loss,
        },
    ))
}

/// Evaluates a batch and, when `target` is given, the parameter gradient
/// of that target.
pub fn evaluate<T: Scalar>(
    policy: &TinyLM<T>,
    pairs: &[PreferencePair],
    ctx: &LossContext<'_, T>,
    cfg: &LossConfig,
    target: Option<Target>,
) -> Result<(LossBreakdown, Option<Gradients<T>>)> {
    if pairs.is_empty() {
        return Err(Error::Empty("preference batch"));
    }
    ctx.check(cfg, policy)?;
    let b = pairs.len();
    let per_pair = |pair: &PreferencePair| -> Result<(PairTerms, Option<Gradients<T>>)> {
        let side = ref_side(pair, ctx, cfg)?;
        let (g, nodes) = build_pair(policy, pair, &side, ctx, cfg, b)?;
        let v = g.forward(policy.params(), &[])?;
        let f = |n: NodeId| v.scalar(n).as_f64();
        let (cw, cl) = nodes.constraint.map_or((0.0, 0.0), |[w, l]| (f(w), f(l)));
        let terms = PairTerms {
            pair_id: pair.pair_id,
            u: f(nodes.u),
            lpd: f(nodes.lpd),
            margin: side.margin.as_f64(),
            delta: nodes.delta.map_or(0.0, f),
            constraint_chosen: cw,
            constraint_rejected: cl,
        };
        let grads = match target {
            None => None,
            Some(t) => {
                let mut grads = policy.params().zeros_like();
                match (t, nodes.delta) {
                    (Target::Loss, _) => g.backward_into(&v, nodes.loss, T::one(), &mut grads)?,
                    (Target::Delta, Some(d)) => g.backward_into(&v, d, T::one(), &mut grads)?,
                    (Target::Delta, None) => {}
                }
                Some(grads)
            }
        };
        Ok((terms, grads))
    };

    let results: Vec<Result<(PairTerms, Option<Gradients<T>>)>> = pairs.par_iter().map(per_pair).collect();
    let mut terms = Vec::with_capacity(b);
    let mut total: Option<Gradients<T>> = target.map(|_| policy.params().zeros_like());
    for r in results {
        let (t, g) = r?;
        terms.push(t);
        if let (Some(total), Some(g)) = (total.as_mut(), g) {
            for id in g.ids() {
                total.get_mut(id).add_assign(g.get(id));
            }
        }
    }
    let loss = terms.iter().map(|t| -log_sigmoid(t.u)).sum::<f64>() / b as f64;
    Ok((LossBreakdown { pairs: terms, loss }, total))
}

/// Batch loss and its gradient with respect to the policy parameters.
pub fn batch_loss<T: Scalar>(
    policy: &TinyLM<T>,
    pairs: &[PreferencePair],
    ctx: &LossContext<'_, T>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Gradients<T>)> {
    let (b, g) = evaluate(policy, pairs, ctx, cfg, Some(Target::Loss))?;
    Ok((b, g.expect("gradient requested")))
}

fn log_sigmoid(u: f64) -> f64 {
    crate::autodiff::log_sigmoid(u)
}

/// `β[log π_θ(y_w|x) − log π_ref(y_w|x)] − β[log π_θ(y_l|x) − log π_ref(y_l|x)]`.
pub fn dpo_u<T: Scalar>(
    policy: &TinyLM<T>,
    reference: &TinyLM<T>,
    pair: &PreferencePair,
    beta: f64,
) -> Result<T> {
    let b = T::of(beta);
    let [w, l] = responses(pair);
    let pw = policy.seq_logprob(&pair.x, w, false)? - reference.seq_logprob(&pair.x, w, false)?;
    let pl = policy.seq_logprob(&pair.x, l, false)? - reference.seq_logprob(&pair.x, l, false)?;
    Ok(b * pw - b * pl)
}

/// `(β/|y_w|)·log π_θ(y_w|x) − (β/|y_l|)·log π_θ(y_l|x) − γ`.
pub fn simpo_u<T: Scalar>(policy: &TinyLM<T>, pair: &PreferencePair, beta: f64, gamma: f64) -> Result<T> {
    let lw = policy.seq_logprob(&pair.x, &pair.y_w, true)?;
    let ll = policy.seq_logprob(&pair.x, &pair.y_l, true)?;
    Ok(T::of(beta) * (lw - ll) - T::of(gamma))
}

/// `Σ_t KL(π_ref(·|x, y_<t) ‖ π_θ(·|x, y_<t))` over response positions.
pub fn seq_kl<T: Scalar>(policy: &TinyLM<T>, reference: &TinyLM<T>, x: &[u32], y: &[u32]) -> Result<T> {
    let p = policy.response_trace(x, y, &[])?;
    let r = reference.response_trace(x, y, &[])?;
    Ok(kl_rows(&r.log_probs, &p.log_probs))
}

/// Sum over rows of `KL(exp(ref_row) ‖ exp(pol_row))` for log-prob rows.
pub fn kl_rows<T: Scalar>(ref_log_probs: &Array<T>, log_probs: &Array<T>) -> T {
    ref_log_probs
        .data()
        .iter()
        .zip(log_probs.data())
        .map(|(&lr, &lp)| lr.exp() * (lr - lp))
        .sum()
}

/// `β·[seq_kl(y_l) − seq_kl(y_w)]`.
pub fn delta_tdpo1<T: Scalar>(
    policy: &TinyLM<T>,
    reference: &TinyLM<T>,
    pair: &PreferencePair,
    beta: f64,
) -> Result<T> {
    let kw = seq_kl(policy, reference, &pair.x, &pair.y_w)?;
    let kl = seq_kl(policy, reference, &pair.x, &pair.y_l)?;
    Ok(T::of(beta) * (kl - kw))
}

/// `α·(β·seq_kl(y_l) − β·seq_kl(y_w))`; the stop-gradient does not change
/// the value.
pub fn delta_tdpo2<T: Scalar>(
    policy: &TinyLM<T>,
    reference: &TinyLM<T>,
    pair: &PreferencePair,
    alpha: f64,
    beta: f64,
) -> Result<T> {
    let kw = seq_kl(policy, reference, &pair.x, &pair.y_w)?;
    let kl = seq_kl(policy, reference, &pair.x, &pair.y_l)?;
    let b = T::of(beta);
    Ok(T::of(alpha) * (b * kl - b * kw))
}

/// `(β/|y_w|)·log π_ref(y_w|x) − (β/|y_l|)·log π_ref(y_l|x)`.
pub fn gamma_ref_ln<T: Scalar>(
    reference: &TinyLM<T>,
    x: &[u32],
    y_w: &[u32],
    y_l: &[u32],
    beta: f64,
) -> Result<T> {
    let b = T::of(beta);
    let lw = reference.seq_logprob(x, y_w, false)?;
    let ll = reference.seq_logprob(x, y_l, false)?;
    Ok(b / T::of(y_w.len() as f64) * lw - b / T::of(y_l.len() as f64) * ll)
}

/// Feature discrepancy between pooled activations:
/// `(1/divisor)·Σ_{i ∈ I_k} w_i (c_θ,i − c_ref,i)²` with
/// `I_k = topk(c_θ) ∪ topk(c_ref)`.
///
/// `ref_indices` replaces `topk(c_ref)` when the reference side is only
/// known through its stored top-k.
pub fn d_fpo<T: Scalar>(
    c_theta: &[T],
    c_ref: &[T],
    ref_indices: Option<&[usize]>,
    k: usize,
    weights: Option<&[f64]>,
    divisor: Divisor,
) -> Result<T> {
    let m = c_theta.len();
    if c_ref.len() != m {
        return Err(Error::Dimension {
            expected: m,
            got: c_ref.len(),
        });
    }
    if let Some(w) = weights {
        if w.len() != m {
            return Err(Error::Dimension {
                expected: m,
                got: w.len(),
            });
        }
    }
    let mut in_set = vec![false; m];
    for i in topk_indices(c_theta, k)? {
        in_set[i] = true;
    }
    match ref_indices {
        Some(idx) => {
            for &i in idx {
                *in_set.get_mut(i).ok_or(Error::Dimension {
                    expected: m,
                    got: i + 1,
                })? = true;
            }
        }
        None => {
            for i in topk_indices(c_ref, k)? {
                in_set[i] = true;
            }
        }
    }
    let mut total = T::zero();
    let mut size = 0usize;
    for i in (0..m).filter(|&i| in_set[i]) {
        let d = c_theta[i] - c_ref[i];
        let w = weights.map_or(T::one(), |w| T::of(w[i]));
        total += w * d * d;
        size += 1;
    }
    let div = match divisor {
        Divisor::K => k,
        Divisor::UnionSize => size,
    };
    Ok(total / T::of(div as f64))
}

/// Discrepancies `(D(y_w), D(y_l))` of the policy against one cache entry.
pub fn fpo_discrepancies<T: Scalar>(
    policy: &TinyLM<T>,
    sae: &SparseAutoencoder<T>,
    cache: &RefCache<T>,
    pair: &PreferencePair,
    cfg: &LossConfig,
) -> Result<(T, T)> {
    let h = cache.header();
    let e = cache.lookup(pair.pair_id)?;
    let mut out = [T::zero(); 2];
    for (slot, (y, stored)) in out
        .iter_mut()
        .zip([(&pair.y_w, &e.chosen), (&pair.y_l, &e.rejected)])
    {
        let live = pooled_activation(policy, sae, h.tap, h.pooling, &pair.x, y)?;
        let dense = PooledActivation::densify(h.m, stored)?;
        let idx: Vec<usize> = stored.iter().map(|&(i, _)| i as usize).collect();
        *slot = d_fpo(
            &live.values,
            &dense,
            Some(&idx),
            h.k,
            cfg.feature_weights.as_deref(),
            cfg.divisor,
        )?;
    }
    Ok((out[0], out[1]))
}

/// `α·(β·D(y_l) − β·D(y_w))` against the cached reference.
pub fn delta_fpo<T: Scalar>(
    policy: &TinyLM<T>,
    sae: &SparseAutoencoder<T>,
    cache: &RefCache<T>,
    pair: &PreferencePair,
    cfg: &LossConfig,
) -> Result<T> {
    let (dw, dl) = fpo_discrepancies(policy, sae, cache, pair, cfg)?;
    let b = T::of(cfg.beta);
    Ok(T::of(cfg.alpha_constraint) * (b * dl - b * dw))
}

/// Largest deviation between the offline (cached) and online (live
/// reference) FPO evaluation of one batch, over the loss and every `u`.
pub fn verify_cache_equivalence<T: Scalar>(
    policy: &TinyLM<T>,
    reference: &TinyLM<T>,
    sae: &SparseAutoencoder<T>,
    cache: &RefCache<T>,
    pairs: &[PreferencePair],
    cfg: &LossConfig,
) -> Result<f64> {
    cache.verify_checksums(sae.checksum(), reference.checksum())?;
    let cfg = LossConfig {
        method: Method::Fpo,
        ..cfg.clone()
    };
    let offline = LossContext::cached(sae, cache);
    let online = LossContext::live(reference).with_feature(cache.header().tap, sae);
    let (a, _) = evaluate(policy, pairs, &offline, &cfg, None)?;
    let (b, _) = evaluate(policy, pairs, &online, &cfg, None)?;
    let mut worst = (a.loss - b.loss).abs();
    for (p, q) in a.pairs.iter().zip(&b.pairs) {
        worst = worst.max((p.u - q.u).abs());
    }
    Ok(worst)
}
