//! Metrics for aligned policies and the experiment grid that collects them.
//!
//! Entropy diversity `H` is the mean, over sampled completions, of the
//! average per-token predictive entropy (temperature 1, nats) of the
//! policy at each generated position.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Scalar};
use crate::cache::RefCache;
use crate::data::PreferencePair;
use crate::error::{Error, Result};
use crate::losses::{d_fpo, fpo_discrepancies, kl_rows, seq_kl, LossConfig, Method};
use crate::model::sample::generate;
use crate::model::{Tap, TapKind, TinyLM};
use crate::sae::{pool, PooledActivation, SparseAutoencoder};

/// Fraction of pairs whose chosen response scores strictly higher.
///
/// Scores are length-normalized log-probabilities when `normalize` is set
/// and plain sums otherwise; ties count as incorrect.
pub fn pref_accuracy<T: Scalar>(
    policy: &TinyLM<T>,
    pairs: &[PreferencePair],
    normalize: bool,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation pairs"));
    }
    let hits: Vec<Result<bool>> = pairs
        .par_iter()
        .map(|p| {
            let w = policy.seq_logprob(&p.x, &p.y_w, normalize)?;
            let l = policy.seq_logprob(&p.x, &p.y_l, normalize)?;
            Ok(w > l)
        })
        .collect();
    let mut correct = 0usize;
    for h in hits {
        correct += h? as usize;
    }
    Ok(correct as f64 / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropyConfig {
    pub samples_per_prompt: usize,
    pub temperature: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self {
            samples_per_prompt: 2,
            temperature: 1.0,
            max_len: 16,
            seed: 0,
        }
    }
}

/// Entropy diversity `H` in nats per token over completions of `prompts`.
pub fn diversity_entropy<T: Scalar>(
    policy: &TinyLM<T>,
    prompts: &[Vec<u32>],
    cfg: &EntropyConfig,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::Empty("entropy prompts"));
    }
    if cfg.samples_per_prompt == 0 || cfg.max_len == 0 {
        return Err(Error::Config("samples_per_prompt and max_len must be positive".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|i| (0..cfg.samples_per_prompt).map(move |s| (i, s)))
        .collect();
    let per: Vec<Result<Option<f64>>> = jobs
        .par_iter()
        .map(|&(i, s)| {
            let seed = cfg.seed ^ ((i as u64) << 20 | s as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let g = generate(policy, &prompts[i], cfg.temperature, cfg.max_len, seed)?;
            Ok((!g.entropies.is_empty()).then(|| g.entropies.iter().sum::<f64>() / g.entropies.len() as f64))
        })
        .collect();
    let mut total = 0.0;
    let mut n = 0usize;
    for h in per {
        if let Some(h) = h? {
            total += h;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("generated positions"));
    }
    Ok(total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlCurves {
    /// Mean sequential KL on chosen responses.
    pub chosen: f64,
    pub rejected: f64,
    /// `β·|rejected − chosen|`.
    pub margin: f64,
}

/// Mean sequential KL from `reference` to `policy` on both sides.
pub fn kl_curves<T: Scalar>(
    policy: &TinyLM<T>,
    reference: &TinyLM<T>,
    pairs: &[PreferencePair],
    beta: f64,
) -> Result<KlCurves> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation pairs"));
    }
    let per: Vec<Result<(f64, f64)>> = pairs
        .par_iter()
        .map(|p| {
            let w = seq_kl(policy, reference, &p.x, &p.y_w)?.as_f64();
            let l = seq_kl(policy, reference, &p.x, &p.y_l)?.as_f64();
            Ok((w, l))
        })
        .collect();
    let (mut cw, mut cl) = (0.0, 0.0);
    for r in per {
        let (w, l) = r?;
        cw += w;
        cl += l;
    }
    let n = pairs.len() as f64;
    let (chosen, rejected) = (cw / n, cl / n);
    Ok(KlCurves {
        chosen,
        rejected,
        margin: beta * (rejected - chosen).abs(),
    })
}

/// Mean over pairs of `|D(y_l) − D(y_w)|` against the cached reference.
pub fn mse_margin<T: Scalar>(
    policy: &TinyLM<T>,
    cache: &RefCache<T>,
    sae: &SparseAutoencoder<T>,
    pairs: &[PreferencePair],
    cfg: &LossConfig,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation pairs"));
    }
    if sae.checksum() != cache.header().sae_checksum {
        return Err(Error::Checksum {
            what: "SAE",
            expected: cache.header().sae_checksum,
            found: sae.checksum(),
        });
    }
    let per: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|p| {
            let (w, l) = fpo_discrepancies(policy, sae, cache, p, cfg)?;
            Ok((l - w).as_f64().abs())
        })
        .collect();
    let mut total = 0.0;
    for r in per {
        total += r?;
    }
    Ok(total / pairs.len() as f64)
}

/// Reference log-prob rows `[|y|, V]` for both responses of each pair.
pub fn reference_log_probs<T: Scalar>(
    reference: &TinyLM<T>,
    pairs: &[PreferencePair],
) -> Result<Vec<[Array<T>; 2]>> {
    pairs
        .par_iter()
        .map(|p| {
            let w = reference.response_trace(&p.x, &p.y_w, &[])?.log_probs;
            let l = reference.response_trace(&p.x, &p.y_l, &[])?.log_probs;
            Ok([w, l])
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldoutMetrics {
    pub pref_accuracy: f64,
    pub kl: KlCurves,
    pub mse_margin: f64,
}

/// [`pref_accuracy`], [`kl_curves`] and [`mse_margin`] from one policy
/// pass per response, against precomputed reference log-probs.
#[allow(clippy::too_many_arguments)]
pub fn heldout_metrics<T: Scalar>(
    policy: &TinyLM<T>,
    ref_log_probs: &[[Array<T>; 2]],
    sae: &SparseAutoencoder<T>,
    cache: &RefCache<T>,
    pairs: &[PreferencePair],
    loss: &LossConfig,
    normalize: bool,
    kl_beta: f64,
) -> Result<HeldoutMetrics> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation pairs"));
    }
    if ref_log_probs.len() != pairs.len() {
        return Err(Error::Dimension {
            expected: pairs.len(),
            got: ref_log_probs.len(),
        });
    }
    let h = cache.header();
    let per: Vec<Result<(bool, f64, f64, f64)>> = pairs
        .par_iter()
        .zip(ref_log_probs)
        .map(|(p, refs)| {
            let e = cache.lookup(p.pair_id)?;
            let mut score = [T::zero(); 2];
            let mut kl = [0.0; 2];
            let mut d = [T::zero(); 2];
            for (s, (y, stored)) in [(&p.y_w, &e.chosen), (&p.y_l, &e.rejected)].into_iter().enumerate() {
                let tr = policy.response_trace(&p.x, y, &[h.tap])?;
                let sum = tr.logprob_sum();
                score[s] = if normalize { sum / T::of(y.len() as f64) } else { sum };
                kl[s] = kl_rows(&refs[s], &tr.log_probs).as_f64();
                let pooled = pool(&sae.encode_rows(&tr.taps[0])?, h.pooling)?;
                let dense = PooledActivation::densify(h.m, stored)?;
                let idx: Vec<usize> = stored.iter().map(|&(i, _)| i as usize).collect();
                d[s] = d_fpo(
                    &pooled.values,
                    &dense,
                    Some(&idx),
                    h.k,
                    loss.feature_weights.as_deref(),
                    loss.divisor,
                )?;
            }
            Ok((score[0] > score[1], kl[0], kl[1], (d[1] - d[0]).as_f64().abs()))
        })
        .collect();
    let (mut hits, mut cw, mut cl, mut mse) = (0usize, 0.0, 0.0, 0.0);
    for r in per {
        let (hit, w, l, m) = r?;
        hits += hit as usize;
        cw += w;
        cl += l;
        mse += m;
    }
    let n = pairs.len() as f64;
    let (chosen, rejected) = (cw / n, cl / n);
    Ok(HeldoutMetrics {
        pref_accuracy: hits as f64 / n,
        kl: KlCurves {
            chosen,
            rejected,
            margin: kl_beta * (rejected - chosen).abs(),
        },
        mse_margin: mse / n,
    })
}

/// Inputs of the storage model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    /// Pairs covered by the cache.
    pub pairs: usize,
    pub batch_size: usize,
    /// Longest scored sequence (prompt plus response).
    pub max_len: usize,
    pub vocab: usize,
    pub ref_params: usize,
}

/// Element counts, not bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    /// Reference scalars kept on disk for the whole run.
    pub stored_ref_floats: usize,
    /// Reference parameters resident during training.
    pub live_ref_params: usize,
    /// Reference logits materialized per batch, per response side.
    pub ref_logits_per_side: usize,
    /// `live_ref_params + 2 · ref_logits_per_side`.
    pub peak_live_arrays: usize,
}

pub fn memory_report(method: Method, k: usize, stats: &DatasetStats) -> MemoryReport {
    let logits = stats.batch_size * stats.max_len * stats.vocab;
    let (stored, params, side) = match method {
        Method::Fpo => (stats.pairs * (2 * k + 1), 0, 0),
        Method::Simpo => (0, 0, 0),
        Method::Dpo => (0, stats.ref_params, 0),
        Method::Tdpo1 | Method::Tdpo2 | Method::SimpoKl => (0, stats.ref_params, logits),
    };
    MemoryReport {
        stored_ref_floats: stored,
        live_ref_params: params,
        ref_logits_per_side: side,
        peak_live_arrays: params + 2 * side,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: Method,
    pub step: usize,
    pub pref_accuracy: f64,
    pub entropy_h: f64,
    pub seq_kl_chosen: f64,
    pub seq_kl_rejected: f64,
    pub kl_margin: f64,
    pub mse_margin: f64,
    pub stored_ref_floats: usize,
    pub peak_live_arrays: usize,
}

impl MetricsReport {
    pub const CSV_COLUMNS: [&'static str; 8] = [
        "pref_accuracy",
        "entropy_h",
        "seq_kl_chosen",
        "seq_kl_rejected",
        "kl_margin",
        "mse_margin",
        "stored_ref_floats",
        "peak_live_arrays",
    ];

    fn csv_values(&self) -> String {
        format!(
            "{:.10},{:.10},{:.10},{:.10},{:.10},{:.10},{},{}",
            self.pref_accuracy,
            self.entropy_h,
            self.seq_kl_chosen,
            self.seq_kl_rejected,
            self.kl_margin,
            self.mse_margin,
            self.stored_ref_floats,
            self.peak_live_arrays
        )
    }
}

/// One cell of the ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridCell {
    /// SAE taps summed in the constraint; the first one also sets the
    /// cache tap.
    pub taps: Vec<Tap>,
    pub alpha_constraint: f64,
    pub stop_gradient: bool,
}

impl Default for GridCell {
    fn default() -> Self {
        Self {
            taps: vec![Tap::residual(3)],
            alpha_constraint: 0.5,
            stop_gradient: true,
        }
    }
}

impl GridCell {
    fn taps_label(&self) -> String {
        self.taps
            .iter()
            .map(|t| {
                let kind = match t.kind {
                    TapKind::Residual => "res",
                    TapKind::MlpOut => "mlp",
                };
                format!("{kind}{}", t.layer)
            })
            .collect::<Vec<_>>()
            .join("+")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub seed: u64,
    pub cell: GridCell,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFailure {
    pub method: Method,
    pub seed: u64,
    pub cell: GridCell,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub failures: Vec<GridFailure>,
}

pub const CSV_KEY_COLUMNS: [&str; 6] = ["method", "seed", "taps", "alpha", "stop_gradient", "step"];

impl GridResult {
    pub fn csv_header() -> String {
        let mut cols: Vec<&str> = CSV_KEY_COLUMNS.to_vec();
        cols.extend(MetricsReport::CSV_COLUMNS);
        cols.join(",")
    }

    /// Rows in grid order under a fixed header.
    pub fn to_csv(&self) -> String {
        let mut out = Self::csv_header();
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.report.method,
                r.seed,
                r.cell.taps_label(),
                r.cell.alpha_constraint,
                r.cell.stop_gradient,
                r.report.step,
                r.report.csv_values()
            );
        }
        out
    }

    /// Rows at the last evaluated step of each run.
    pub fn final_rows(&self) -> Vec<&GridRow> {
        let mut out: Vec<&GridRow> = Vec::new();
        for r in &self.rows {
            match out.last_mut() {
                Some(last)
                    if last.seed == r.seed
                        && last.cell == r.cell
                        && last.report.method == r.report.method =>
                {
                    *last = r
                }
                _ => out.push(r),
            }
        }
        out
    }
}

/// Runs `run(method, seed, cell)` over methods × seeds × cells, in that
/// nesting order. A failing run is recorded and the grid continues.
pub fn run_experiment_grid<F>(methods: &[Method], seeds: &[u64], cells: &[GridCell], mut run: F) -> GridResult
where
    F: FnMut(Method, u64, &GridCell) -> Result<Vec<MetricsReport>>,
{
    let mut out = GridResult::default();
    for cell in cells {
        for &seed in seeds {
            for &method in methods {
                match run(method, seed, cell) {
                    Ok(reports) => out.rows.extend(reports.into_iter().map(|report| GridRow {
                        seed,
                        cell: cell.clone(),
                        report,
                    })),
                    Err(e) => out.failures.push(GridFailure {
                        method,
                        seed,
                        cell: cell.clone(),
                        error: e.to_string(),
                    }),
                }
            }
        }
    }
    out
}

/// Median of a non-empty sample.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Pearson correlation; 0 when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return 0.0;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (x, y) = (a[i] - ma, b[i] - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}
