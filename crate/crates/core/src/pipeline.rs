//! End-to-end lab pipeline: synthetic data, SFT reference, SAE, reference
//! cache, alignment and evaluation.
//!
//! The CLI runs these stages one command at a time through files; the
//! functions here run them in memory.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::align::{align, AlignConfig};
use crate::autodiff::Array;
use crate::cache::{precompute, RefCache};
use crate::data::{gen_pref_dataset, gen_sft_corpus, split_pairs, LengthConfig, PrefRule, PreferencePair};
use crate::error::{Error, Result};
use crate::eval::{
    diversity_entropy, heldout_metrics, memory_report, reference_log_probs, DatasetStats, EntropyConfig, GridCell,
    MetricsReport,
};
use crate::losses::{FeatureSource, LossConfig, LossContext, Method};
use crate::model::{LmConfig, SftConfig, SftReport, Tap, TinyLM};
use crate::sae::{collect_activations, train_sae, SaeConfig, SaeReport, SparseAutoencoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub sft_size: usize,
    pub pairs: usize,
    pub heldout: usize,
    pub lengths: LengthConfig,
    pub rule: PrefRule,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sft_size: 20_000,
            pairs: 4_000,
            heldout: 400,
            lengths: LengthConfig::default(),
            rule: PrefRule::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub entropy: EntropyConfig,
    /// Distinct held-out prompts sampled for `H`.
    pub entropy_prompts: usize,
    /// β applied to the KL margin, shared by every method so margins compare.
    pub kl_beta: f64,
    pub normalize_accuracy: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            entropy: EntropyConfig::default(),
            entropy_prompts: 64,
            kl_beta: 0.1,
            normalize_accuracy: true,
        }
    }
}

/// Every knob of a lab run except the command and paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: LmConfig,
    pub sft: SftConfig,
    pub sae: SaeConfig,
    /// Hidden-state rows gathered from the SFT corpus for SAE training.
    pub sae_rows: usize,
    pub align: AlignConfig,
    pub eval: EvalConfig,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: LmConfig::default(),
            sft: SftConfig::default(),
            sae: SaeConfig::default(),
            sae_rows: 40_000,
            align: AlignConfig {
                eval_every: 16,
                ..AlignConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

/// Stage seeds derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct StageSeeds {
    pub corpus: u64,
    pub pairs: u64,
    pub model_init: u64,
    pub sft: u64,
    pub sae: u64,
    pub align: u64,
    pub eval: u64,
}

impl StageSeeds {
    pub fn from_run(seed: u64) -> Self {
        let s = seed.wrapping_mul(16);
        Self {
            corpus: s,
            pairs: s + 1,
            model_init: s + 2,
            sft: s + 3,
            sae: s + 4,
            align: s + 5,
            eval: s + 6,
        }
    }
}

impl LabConfig {
    pub fn seeds(&self) -> StageSeeds {
        StageSeeds::from_run(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.align.loss.validate()?;
        let need = 1 + self.data.lengths.prompt_max + self.data.lengths.response_max;
        if need > self.model.context {
            return Err(Error::Config(format!(
                "context {} cannot hold prompt_max + response_max + 1 = {need}",
                self.model.context
            )));
        }
        if self.data.heldout == 0 || self.data.heldout >= self.data.pairs {
            return Err(Error::Config("data.heldout must be in 1..data.pairs".into()));
        }
        let tap = self.align.loss.tap;
        if tap.layer >= self.model.layers {
            return Err(Error::Config(format!(
                "align.loss.tap.layer {} out of range for {} layers",
                tap.layer, self.model.layers
            )));
        }
        Ok(())
    }
}

pub struct Datasets {
    pub corpus: Vec<Vec<u32>>,
    pub train: Vec<PreferencePair>,
    pub heldout: Vec<PreferencePair>,
}

pub fn generate_data(cfg: &LabConfig) -> Result<Datasets> {
    let s = cfg.seeds();
    let corpus = gen_sft_corpus(s.corpus, cfg.data.sft_size, &cfg.data.lengths)?;
    let pairs = gen_pref_dataset(s.pairs, cfg.data.pairs, &cfg.data.rule, &cfg.data.lengths)?;
    let (train, heldout) = split_pairs(&pairs, cfg.data.heldout)?;
    Ok(Datasets { corpus, train, heldout })
}

pub fn train_reference(cfg: &LabConfig, corpus: &[Vec<u32>]) -> Result<(TinyLM<f32>, SftReport)> {
    let s = cfg.seeds();
    let mut model = TinyLM::init(cfg.model, s.model_init)?;
    let sft = SftConfig {
        seed: s.sft,
        ..cfg.sft.clone()
    };
    let report = crate::model::train_sft(&mut model, corpus, &sft)?;
    Ok((model, report))
}

pub fn train_dictionary(
    cfg: &LabConfig,
    reference: &TinyLM<f32>,
    corpus: &[Vec<u32>],
    tap: Tap,
) -> Result<(SparseAutoencoder<f32>, SaeReport)> {
    let acts = collect_activations(reference, corpus, tap, cfg.sae_rows)?;
    let sae = SaeConfig {
        seed: cfg.seeds().sae ^ ((tap.layer as u64) << 8 | tap.kind.code() as u64),
        ..cfg.sae.clone()
    };
    train_sae(&acts, &sae)
}

/// `base` specialized to `method` and `cell`. The SimPO family keeps its
/// own default `β`; every other method uses `base.beta`.
pub fn method_loss(base: &LossConfig, method: Method, cell: &GridCell) -> LossConfig {
    LossConfig {
        method,
        beta: match method {
            Method::Simpo | Method::SimpoKl => LossConfig::for_method(method).beta,
            _ => base.beta,
        },
        alpha_constraint: cell.alpha_constraint,
        stop_gradient: cell.stop_gradient,
        tap: cell.taps.first().copied().unwrap_or(base.tap),
        ..base.clone()
    }
}

/// Frozen artifacts shared by every alignment run of one seed.
pub struct Lab {
    pub cfg: LabConfig,
    pub data: Datasets,
    pub reference: TinyLM<f32>,
    /// Absent when the reference was loaded rather than trained here.
    pub sft_report: Option<SftReport>,
    pub saes: BTreeMap<Tap, SparseAutoencoder<f32>>,
    pub sae_reports: BTreeMap<Tap, SaeReport>,
    pub caches: BTreeMap<Tap, RefCache<f32>>,
    ref_log_probs: OnceLock<Vec<[Array<f32>; 2]>>,
}

impl Lab {
    /// Generates data and trains the reference.
    pub fn build(cfg: LabConfig) -> Result<Self> {
        cfg.validate()?;
        let data = generate_data(&cfg)?;
        let (reference, sft_report) = train_reference(&cfg, &data.corpus)?;
        Ok(Self {
            cfg,
            data,
            reference,
            sft_report: Some(sft_report),
            saes: BTreeMap::new(),
            sae_reports: BTreeMap::new(),
            caches: BTreeMap::new(),
            ref_log_probs: OnceLock::new(),
        })
    }

    /// Evaluation-only lab around existing artifacts.
    pub fn from_parts(
        cfg: LabConfig,
        reference: TinyLM<f32>,
        heldout: Vec<PreferencePair>,
        sae: SparseAutoencoder<f32>,
        cache: RefCache<f32>,
    ) -> Self {
        let tap = cache.header().tap;
        Self {
            cfg,
            data: Datasets {
                corpus: Vec::new(),
                train: Vec::new(),
                heldout,
            },
            reference,
            sft_report: None,
            saes: BTreeMap::from([(tap, sae)]),
            sae_reports: BTreeMap::new(),
            caches: BTreeMap::from([(tap, cache)]),
            ref_log_probs: OnceLock::new(),
        }
    }

    /// SAE for `tap`, trained on first use.
    pub fn sae(&mut self, tap: Tap) -> Result<&SparseAutoencoder<f32>> {
        if !self.saes.contains_key(&tap) {
            let (sae, report) = train_dictionary(&self.cfg, &self.reference, &self.data.corpus, tap)?;
            self.saes.insert(tap, sae);
            self.sae_reports.insert(tap, report);
        }
        Ok(&self.saes[&tap])
    }

    /// Cache over train and held-out pairs at `tap`, built on first use.
    pub fn cache(&mut self, tap: Tap) -> Result<&RefCache<f32>> {
        if !self.caches.contains_key(&tap) {
            self.sae(tap)?;
            let sae = &self.saes[&tap];
            let all: Vec<PreferencePair> = self.data.train.iter().chain(&self.data.heldout).cloned().collect();
            let loss = &self.cfg.align.loss;
            let cache = precompute(&all, &self.reference, sae, tap, loss.pooling, loss.k)?;
            self.caches.insert(tap, cache);
        }
        Ok(&self.caches[&tap])
    }

    fn prepare(&mut self, cell: &GridCell) -> Result<()> {
        for &t in &cell.taps {
            self.sae(t)?;
        }
        self.cache(cell.taps[0])?;
        Ok(())
    }

    pub fn dataset_stats(&self) -> DatasetStats {
        let l = &self.cfg.data.lengths;
        let covered = self.data.train.len() + self.data.heldout.len();
        DatasetStats {
            pairs: self.caches.values().next().map_or(covered, |c| c.len()),
            batch_size: self.cfg.align.batch_size,
            max_len: 1 + l.prompt_max + l.response_max,
            vocab: self.cfg.model.vocab,
            ref_params: self.cfg.model.param_count(),
        }
    }

    /// Metrics of `policy` on the held-out pairs.
    pub fn evaluate(&self, method: Method, step: usize, policy: &TinyLM<f32>, cell_tap: Tap) -> Result<MetricsReport> {
        let held = &self.data.heldout;
        let ev = &self.cfg.eval;
        let mut prompts: Vec<Vec<u32>> = Vec::new();
        for p in held {
            if prompts.len() == ev.entropy_prompts {
                break;
            }
            if !prompts.contains(&p.x) {
                prompts.push(p.x.clone());
            }
        }
        let entropy = EntropyConfig {
            seed: self.cfg.seeds().eval,
            ..ev.entropy
        };
        let sae = &self.saes[&cell_tap];
        let cache = &self.caches[&cell_tap];
        let mut loss = self.cfg.align.loss.clone();
        loss.tap = cell_tap;
        let ref_lp = match self.ref_log_probs.get() {
            Some(r) => r,
            None => {
                let r = reference_log_probs(&self.reference, held)?;
                self.ref_log_probs.get_or_init(|| r)
            }
        };
        let hm = heldout_metrics(policy, ref_lp, sae, cache, held, &loss, ev.normalize_accuracy, ev.kl_beta)?;
        let memory = memory_report(method, loss.k, &self.dataset_stats());
        Ok(MetricsReport {
            method,
            step,
            pref_accuracy: hm.pref_accuracy,
            entropy_h: diversity_entropy(policy, &prompts, &entropy)?,
            seq_kl_chosen: hm.kl.chosen,
            seq_kl_rejected: hm.kl.rejected,
            kl_margin: hm.kl.margin,
            mse_margin: hm.mse_margin,
            stored_ref_floats: memory.stored_ref_floats,
            peak_live_arrays: memory.peak_live_arrays,
        })
    }

    /// Loss settings of `method` in `cell`, on top of the configured loss.
    pub fn loss_config(&self, method: Method, cell: &GridCell) -> LossConfig {
        method_loss(&self.cfg.align.loss, method, cell)
    }

    /// Aligns a fresh copy of the reference and returns the trained policy
    /// with one report per evaluation step.
    pub fn run(&mut self, method: Method, cell: &GridCell) -> Result<(TinyLM<f32>, Vec<MetricsReport>)> {
        if cell.taps.is_empty() {
            return Err(Error::Config("grid cell needs at least one tap".into()));
        }
        self.prepare(cell)?;
        let loss = self.loss_config(method, cell);
        let align_cfg = AlignConfig {
            loss,
            seed: self.cfg.seeds().align,
            ..self.cfg.align.clone()
        };
        let this = &*self;
        let mut features = vec![FeatureSource {
            tap: cell.taps[0],
            sae: &this.saes[&cell.taps[0]],
            cache: Some(&this.caches[&cell.taps[0]]),
        }];
        for &t in &cell.taps[1..] {
            features.push(FeatureSource {
                tap: t,
                sae: &this.saes[&t],
                cache: None,
            });
        }
        let needs_live = method.needs_reference() || cell.taps.len() > 1;
        let ctx = LossContext {
            reference: needs_live.then_some(&this.reference),
            features: if method == Method::Fpo { features } else { Vec::new() },
        };
        let mut policy = this.reference.clone();
        let mut reports = Vec::new();
        align(&mut policy, &this.data.train, &ctx, &align_cfg, |step, p| {
            reports.push(this.evaluate(method, step, p, cell.taps[0])?);
            Ok(())
        })?;
        Ok((policy, reports))
    }
}
