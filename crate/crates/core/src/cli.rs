//! Command-line front end.
//!
//! ```text
//! fpo-lab <command> [--config run.json] [--out-dir DIR] [--seed N]
//!                   [--method M] [--set key.path=value]...
//! ```
//!
//! Every command reads one JSON [`RunConfig`], applies flag overrides,
//! writes its artifacts under `out_dir` and finishes with
//! `manifest-<command>.json`. Exit codes: 0 success, 1 other failure,
//! 2 configuration error, 3 checksum mismatch, 4 numerical divergence.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::align::align;
use crate::cache::{precompute, RefCache};
use crate::data::{read_corpus, read_pairs, write_corpus, write_pairs, PreferencePair};
use crate::error::{Error, Result};
use crate::eval::{run_experiment_grid, GridCell, GridResult};
use crate::io::{content_hash, read_file, write_file};
use crate::losses::{LossContext, Method};
use crate::model::TinyLM;
use crate::pipeline::{generate_data, method_loss, train_dictionary, train_reference, Lab, LabConfig};
use crate::sae::SparseAutoencoder;
use crate::theory::{kl_mse_bound_check, logit_kl_quad_check, scale_sweep, BoundReport, QuadReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CHECKSUM: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

pub const THREADS_ENV: &str = "FPO_LAB_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    GenData,
    TrainSft,
    TrainSae,
    PrecomputeRef,
    Align,
    Eval,
    VerifyTheory,
    Sweep,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainSft => "train-sft",
            Command::TrainSae => "train-sae",
            Command::PrecomputeRef => "precompute-ref",
            Command::Align => "align",
            Command::Eval => "eval",
            Command::VerifyTheory => "verify-theory",
            Command::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fpo-lab", version, about = "Preference-optimization lab on a tiny language model")]
pub struct Args {
    pub command: Command,
    /// JSON run configuration; defaults apply to absent fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Loss method for `align` and `eval`.
    #[arg(long)]
    pub method: Option<String>,
    /// Override one config field, e.g. `--set lab.align.loss.k=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

/// Files read by the commands. Outputs always go under `out_dir`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out_dir: PathBuf,
    pub corpus: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub heldout: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub sae: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub policy: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Empty means one cell taken from `lab.align.loss`.
    pub cells: Vec<GridCell>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            seeds: vec![0, 1, 2, 3, 4],
            cells: Vec::new(),
        }
    }
}

impl SweepConfig {
    pub fn resolved_cells(&self, lab: &LabConfig) -> Result<Vec<GridCell>> {
        let loss = &lab.align.loss;
        let cells = if self.cells.is_empty() {
            vec![GridCell {
                taps: vec![loss.tap],
                alpha_constraint: loss.alpha_constraint,
                stop_gradient: loss.stop_gradient,
            }]
        } else {
            self.cells.clone()
        };
        for c in &cells {
            if c.taps.is_empty() {
                return Err(Error::Config("sweep cell without taps".into()));
            }
            if let Some(t) = c.taps.iter().find(|t| t.layer >= lab.model.layers) {
                return Err(Error::Config(format!(
                    "sweep cell tap layer {} out of range for {} layers",
                    t.layer, lab.model.layers
                )));
            }
        }
        Ok(cells)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub trials: usize,
    pub scale: f64,
    pub sweep_scales: Vec<f64>,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            trials: 1000,
            scale: 1e-3,
            sweep_scales: vec![1e-3, 1e-1, 1.0],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub lab: LabConfig,
    pub sweep: SweepConfig,
    pub theory: TheoryConfig,
}

impl RunConfig {
    /// Parses a config document, applies dotted-path overrides and
    /// validates the result.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config JSON: {e}")))?;
        if !value.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.lab.validate()?;
        Ok(cfg)
    }
}

fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("override key `{key}` has an empty segment")));
        }
        let obj = slot
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        slot = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one segment")
}

/// Maps an error to its process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Json(_) => EXIT_CONFIG,
        Error::Checksum { .. } => EXIT_CHECKSUM,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_FAILURE,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match exit_code(e) {
        EXIT_CONFIG => "config",
        EXIT_CHECKSUM => "checksum",
        EXIT_DIVERGENCE => "divergence",
        _ => "failure",
    }
}

/// Caps rayon's global pool from `FPO_LAB_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // A second initialization (tests, embedding) keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: Command,
    pub config_hash: String,
    pub config: RunConfig,
    pub inputs: Vec<FileRecord>,
    pub artifacts: Vec<FileRecord>,
}

fn hex(x: u64) -> String {
    format!("{x:016x}")
}

fn record(path: &Path) -> Result<FileRecord> {
    Ok(FileRecord {
        path: path.to_path_buf(),
        checksum: hex(content_hash(&read_file(path)?)),
    })
}

struct Run<'a> {
    cfg: &'a RunConfig,
    method: Method,
    inputs: Vec<PathBuf>,
    artifacts: Vec<PathBuf>,
}

impl Run<'_> {
    fn input(&mut self, name: &'static str, path: &Option<PathBuf>) -> Result<PathBuf> {
        let p = path
            .clone()
            .ok_or_else(|| Error::Config(format!("missing required field paths.{name}")))?;
        if !p.is_file() {
            return Err(Error::Config(format!("paths.{name} = {} does not exist", p.display())));
        }
        if !self.inputs.contains(&p) {
            self.inputs.push(p.clone());
        }
        Ok(p)
    }

    fn output(&mut self, name: &str) -> PathBuf {
        let p = self.cfg.paths.out_dir.join(name);
        self.artifacts.push(p.clone());
        p
    }

    fn write_json<S: Serialize>(&mut self, name: &str, v: &S) -> Result<()> {
        let p = self.output(name);
        let mut text = serde_json::to_string_pretty(v)?;
        text.push('\n');
        write_file(&p, text.as_bytes())
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.output(name);
        write_file(&p, text.as_bytes())
    }
}

/// Resolves every input the command will read, before any work starts.
fn check_inputs(run: &mut Run<'_>, command: Command) -> Result<()> {
    let p = run.cfg.paths.clone();
    match command {
        Command::GenData | Command::VerifyTheory | Command::Sweep => {}
        Command::TrainSft => {
            run.input("corpus", &p.corpus)?;
        }
        Command::TrainSae => {
            run.input("corpus", &p.corpus)?;
            run.input("reference", &p.reference)?;
        }
        Command::PrecomputeRef => {
            run.input("pairs", &p.pairs)?;
            run.input("reference", &p.reference)?;
            run.input("sae", &p.sae)?;
            if p.heldout.is_some() {
                run.input("heldout", &p.heldout)?;
            }
        }
        Command::Align => {
            run.input("pairs", &p.pairs)?;
            run.input("reference", &p.reference)?;
            if run.method == Method::Fpo {
                run.input("cache", &p.cache)?;
                run.input("sae", &p.sae)?;
            }
        }
        Command::Eval => {
            run.input("policy", &p.policy)?;
            run.input("reference", &p.reference)?;
            run.input("heldout", &p.heldout)?;
            run.input("sae", &p.sae)?;
            run.input("cache", &p.cache)?;
        }
    }
    Ok(())
}

fn load_pairs(run: &mut Run<'_>, include_heldout: bool) -> Result<Vec<PreferencePair>> {
    let p = run.cfg.paths.clone();
    let mut pairs = read_pairs(&run.input("pairs", &p.pairs)?)?;
    if include_heldout && p.heldout.is_some() {
        pairs.extend(read_pairs(&run.input("heldout", &p.heldout)?)?);
    }
    Ok(pairs)
}

#[derive(Serialize)]
struct TheoryReport {
    quad: QuadReport,
    bound: BoundReport,
    sweep: Vec<BoundReport>,
}

fn bound_csv(reports: &[BoundReport]) -> String {
    let mut out = String::from(
        "trials,scale,violations,max_ratio,operator_norm,epsilon,linearization_max_error,topk_violations,min_topk_gap\n",
    );
    for r in reports {
        out.push_str(&format!(
            "{},{:e},{},{:.10e},{:.10},{:e},{:e},{},{:.10e}\n",
            r.trials,
            r.scale,
            r.violations,
            r.max_ratio,
            r.operator_norm,
            r.epsilon,
            r.linearization_max_error,
            r.topk_violations,
            r.min_topk_gap
        ));
    }
    out
}

fn execute(run: &mut Run<'_>, command: Command) -> Result<String> {
    let cfg = run.cfg;
    let lab = &cfg.lab;
    let p = cfg.paths.clone();
    match command {
        Command::GenData => {
            let d = generate_data(lab)?;
            write_corpus(&run.output("corpus.jsonl"), &d.corpus)?;
            write_pairs(&run.output("pairs_train.jsonl"), &d.train)?;
            write_pairs(&run.output("pairs_heldout.jsonl"), &d.heldout)?;
            Ok(format!(
                "{} SFT sequences, {} train pairs, {} held-out pairs",
                d.corpus.len(),
                d.train.len(),
                d.heldout.len()
            ))
        }
        Command::TrainSft => {
            let corpus = read_corpus(&run.input("corpus", &p.corpus)?)?;
            let (model, report) = train_reference(lab, &corpus)?;
            model.save(&run.output("reference.fpom"))?;
            run.write_json("sft_report.json", &report)?;
            Ok(format!(
                "held-out cross-entropy {:.4} -> {:.4}",
                report.initial_heldout_ce, report.final_heldout_ce
            ))
        }
        Command::TrainSae => {
            let corpus = read_corpus(&run.input("corpus", &p.corpus)?)?;
            let reference: TinyLM<f32> = TinyLM::load(&run.input("reference", &p.reference)?)?;
            let (sae, report) = train_dictionary(lab, &reference, &corpus, lab.align.loss.tap)?;
            sae.save(&run.output("sae.fpos"))?;
            run.write_json("sae_report.json", &report)?;
            Ok(format!(
                "mean L0 {:.2}, top-{} mass {:.4}, mse {:.4}",
                report.last.mean_l0, report.last.top_n, report.last.top_mass, report.final_mse
            ))
        }
        Command::PrecomputeRef => {
            let pairs = load_pairs(run, true)?;
            let reference: TinyLM<f32> = TinyLM::load(&run.input("reference", &p.reference)?)?;
            let sae: SparseAutoencoder<f32> = SparseAutoencoder::load(&run.input("sae", &p.sae)?)?;
            let l = &lab.align.loss;
            let cache = precompute(&pairs, &reference, &sae, l.tap, l.pooling, l.k)?;
            cache.save(&run.output("ref_cache.fpoc"))?;
            cache.export_jsonl(&run.output("ref_cache.jsonl"))?;
            Ok(format!("{} entries, {} cached floats", cache.len(), cache.cached_floats()))
        }
        Command::Align => {
            let pairs = load_pairs(run, false)?;
            let reference: TinyLM<f32> = TinyLM::load(&run.input("reference", &p.reference)?)?;
            let mut align_cfg = lab.align.clone();
            let cell = GridCell {
                taps: vec![lab.align.loss.tap],
                alpha_constraint: lab.align.loss.alpha_constraint,
                stop_gradient: lab.align.loss.stop_gradient,
            };
            align_cfg.loss = method_loss(&lab.align.loss, run.method, &cell);
            align_cfg.seed = lab.seeds().align;
            let (sae, cache) = if run.method == Method::Fpo {
                let sae: SparseAutoencoder<f32> = SparseAutoencoder::load(&run.input("sae", &p.sae)?)?;
                let cache: RefCache<f32> = RefCache::load(&run.input("cache", &p.cache)?)?;
                cache.verify_checksums(sae.checksum(), reference.checksum())?;
                (Some(sae), Some(cache))
            } else {
                (None, None)
            };
            let ctx = match (&sae, &cache) {
                (Some(s), Some(c)) => LossContext::cached(s, c),
                _ if run.method.needs_reference() => LossContext::live(&reference),
                _ => LossContext::none(),
            };
            let mut policy = reference.clone();
            let report = align(&mut policy, &pairs, &ctx, &align_cfg, |_, _| Ok(()))?;
            policy.save(&run.output(&format!("policy-{}.fpom", run.method)))?;
            let mut log = String::from("step,loss,grad_norm,lr\n");
            for s in &report.steps {
                log.push_str(&format!("{},{:.10},{:.10},{:e}\n", s.step, s.loss, s.grad_norm, s.lr));
            }
            run.write_text(&format!("align-{}.csv", run.method), &log)?;
            let last = report.steps.last().map_or(f64::NAN, |s| s.loss);
            Ok(format!("{} steps, final batch loss {last:.6}", report.steps.len()))
        }
        Command::Eval => {
            let policy: TinyLM<f32> = TinyLM::load(&run.input("policy", &p.policy)?)?;
            let reference: TinyLM<f32> = TinyLM::load(&run.input("reference", &p.reference)?)?;
            let heldout = read_pairs(&run.input("heldout", &p.heldout)?)?;
            let sae: SparseAutoencoder<f32> = SparseAutoencoder::load(&run.input("sae", &p.sae)?)?;
            let cache: RefCache<f32> = RefCache::load(&run.input("cache", &p.cache)?)?;
            cache.verify_checksums(sae.checksum(), reference.checksum())?;
            let tap = cache.header().tap;
            let lab_state = Lab::from_parts(lab.clone(), reference, heldout, sae, cache);
            let report = lab_state.evaluate(run.method, 0, &policy, tap)?;
            let result = GridResult {
                rows: vec![crate::eval::GridRow {
                    seed: lab.seed,
                    cell: GridCell {
                        taps: vec![tap],
                        alpha_constraint: lab.align.loss.alpha_constraint,
                        stop_gradient: lab.align.loss.stop_gradient,
                    },
                    report: report.clone(),
                }],
                failures: Vec::new(),
            };
            run.write_text("metrics.csv", &result.to_csv())?;
            Ok(format!(
                "accuracy {:.4}, H {:.4}, kl_margin {:.6}, mse_margin {:.6}",
                report.pref_accuracy, report.entropy_h, report.kl_margin, report.mse_margin
            ))
        }
        Command::VerifyTheory => {
            let t = &cfg.theory;
            let model: TinyLM<f64> = match &p.reference {
                Some(_) => TinyLM::<f32>::load(&run.input("reference", &p.reference)?)?.cast(),
                None => TinyLM::init(lab.model, lab.seeds().model_init)?,
            };
            let sae = SparseAutoencoder::exact_reconstruction(model.config().d_model)?;
            let logits = model.forward(&[crate::model::vocab::BOS], &[])?.logits;
            let quad = logit_kl_quad_check(logits.row(0), t.trials, t.scale, lab.seed)?;
            let bound = kl_mse_bound_check(&model, &sae, t.trials, t.scale, lab.seed)?;
            let sweep = scale_sweep(&model, &sae, t.trials, &t.sweep_scales, lab.seed)?;
            let mut rows = vec![bound];
            rows.extend(sweep.iter().copied());
            run.write_text("theory.csv", &bound_csv(&rows))?;
            run.write_json("theory.json", &TheoryReport { quad, bound, sweep })?;
            Ok(format!(
                "M = {:.6}, {} / {} bound violations at scale {:e}, linearization error {:e}",
                bound.operator_norm, bound.violations, bound.trials, bound.scale, bound.linearization_max_error
            ))
        }
        Command::Sweep => {
            let s = &cfg.sweep;
            if s.methods.is_empty() || s.seeds.is_empty() {
                return Err(Error::Config("sweep needs methods and seeds".into()));
            }
            let cells = s.resolved_cells(lab)?;
            let mut labs: Vec<(u64, Result<Lab>)> = Vec::new();
            let result = run_experiment_grid(&s.methods, &s.seeds, &cells, |method, seed, cell| {
                if labs.last().is_none_or(|(s, _)| *s != seed) {
                    labs.clear();
                    labs.push((seed, Lab::build(LabConfig { seed, ..lab.clone() })));
                }
                match &mut labs.last_mut().expect("lab for seed").1 {
                    Ok(l) => Ok(l.run(method, cell)?.1),
                    Err(e) => Err(Error::Generation(format!("seed {seed} setup failed: {e}"))),
                }
            });
            run.write_text("grid.csv", &result.to_csv())?;
            run.write_json("grid_failures.json", &result.failures)?;
            Ok(format!("{} rows, {} failed runs", result.rows.len(), result.failures.len()))
        }
    }
}

/// Runs one command and writes its manifest. Returns a one-line summary.
pub fn run(command: Command, cfg: &RunConfig, method: Method) -> Result<String> {
    let mut run = Run {
        cfg,
        method,
        inputs: Vec::new(),
        artifacts: Vec::new(),
    };
    check_inputs(&mut run, command)?;
    let summary = execute(&mut run, command)?;
    let manifest = Manifest {
        command,
        config_hash: hex(content_hash(serde_json::to_string(cfg)?.as_bytes())),
        config: cfg.clone(),
        inputs: run.inputs.iter().map(|p| record(p)).collect::<Result<_>>()?,
        artifacts: run.artifacts.iter().map(|p| record(p)).collect::<Result<_>>()?,
    };
    let path = cfg.paths.out_dir.join(format!("manifest-{}.json", command.as_str()));
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_file(&path, text.as_bytes())?;
    Ok(summary)
}

/// Builds the effective configuration from parsed arguments.
pub fn resolve(args: &Args) -> Result<(RunConfig, Method)> {
    let text = match &args.config {
        Some(p) => String::from_utf8(read_file(p).map_err(|e| Error::Config(e.to_string()))?)
            .map_err(|_| Error::Config(format!("{} is not UTF-8", p.display())))?,
        None => "{}".to_string(),
    };
    let mut overrides = args.overrides.clone();
    if let Some(dir) = &args.out_dir {
        overrides.push(format!("paths.out_dir={}", Value::String(dir.display().to_string())));
    }
    if let Some(seed) = args.seed {
        overrides.push(format!("lab.seed={seed}"));
    }
    let cfg = RunConfig::from_json(&text, &overrides)?;
    let method = match &args.method {
        Some(m) => m.parse()?,
        None => cfg.lab.align.loss.method,
    };
    Ok((cfg, method))
}

/// Parses `argv`, runs the command and returns the exit code. Errors are
/// reported on stderr as one JSON object.
pub fn main_with_args<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let outcome = init_threads()
        .and_then(|_| resolve(&args))
        .and_then(|(cfg, method)| run(args.command, &cfg, method));
    match outcome {
        Ok(summary) => {
            println!("{}: {summary}", args.command.as_str());
            EXIT_OK
        }
        Err(e) => {
            let code = exit_code(&e);
            let report = serde_json::json!({
                "command": args.command.as_str(),
                "error": error_kind(&e),
                "message": e.to_string(),
                "exit_code": code,
            });
            eprintln!("{report}");
            code
        }
    }
}
