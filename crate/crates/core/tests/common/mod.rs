#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_fpo-lab");

pub fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

/// Runs one CLI command with the smoke config plus `extra` arguments.
pub fn fpo_lab(command: &str, out: &Path, extra: &[String]) -> Output {
    fpo_lab_threads(command, out, extra, "2")
}

pub fn fpo_lab_threads(command: &str, out: &Path, extra: &[String], threads: &str) -> Output {
    Command::new(BIN)
        .arg(command)
        .arg("--config")
        .arg(config_path("smoke.json"))
        .arg("--out-dir")
        .arg(out)
        .args(extra)
        .env("FPO_LAB_THREADS", threads)
        .output()
        .expect("spawn fpo-lab")
}

pub fn set(key: &str, path: &Path) -> Vec<String> {
    vec!["--set".into(), format!("{key}={}", path.display())]
}

fn ok(o: Output, what: &str) -> Output {
    assert!(
        o.status.success(),
        "{what} failed ({:?}): {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

/// gen-data, train-sft, train-sae, precompute-ref, align and eval for
/// `method`, all under `out`, on `threads` worker threads.
pub fn staged_pipeline(out: &Path, method: &str, threads: &str) {
    let f = |n: &str| out.join(n);
    let fpo_lab = |c: &str, o: &Path, e: &[String]| fpo_lab_threads(c, o, e, threads);
    ok(fpo_lab("gen-data", out, &[]), "gen-data");
    ok(fpo_lab("train-sft", out, &set("paths.corpus", &f("corpus.jsonl"))), "train-sft");
    let mut a = set("paths.corpus", &f("corpus.jsonl"));
    a.extend(set("paths.reference", &f("reference.fpom")));
    ok(fpo_lab("train-sae", out, &a), "train-sae");
    let mut a = set("paths.pairs", &f("pairs_train.jsonl"));
    a.extend(set("paths.heldout", &f("pairs_heldout.jsonl")));
    a.extend(set("paths.reference", &f("reference.fpom")));
    a.extend(set("paths.sae", &f("sae.fpos")));
    ok(fpo_lab("precompute-ref", out, &a), "precompute-ref");
    let mut a = vec!["--method".to_string(), method.to_string()];
    a.extend(set("paths.pairs", &f("pairs_train.jsonl")));
    a.extend(set("paths.reference", &f("reference.fpom")));
    a.extend(set("paths.sae", &f("sae.fpos")));
    a.extend(set("paths.cache", &f("ref_cache.fpoc")));
    ok(fpo_lab("align", out, &a), "align");
    let mut a = vec!["--method".to_string(), method.to_string()];
    a.extend(set("paths.policy", &f(&format!("policy-{method}.fpom"))));
    a.extend(set("paths.heldout", &f("pairs_heldout.jsonl")));
    a.extend(set("paths.reference", &f("reference.fpom")));
    a.extend(set("paths.sae", &f("sae.fpos")));
    a.extend(set("paths.cache", &f("ref_cache.fpoc")));
    ok(fpo_lab("eval", out, &a), "eval");
}

/// Artifacts that must be byte-identical between reruns.
pub const DETERMINISTIC: [&str; 9] = [
    "corpus.jsonl",
    "pairs_train.jsonl",
    "pairs_heldout.jsonl",
    "reference.fpom",
    "sae.fpos",
    "ref_cache.fpoc",
    "policy-fpo.fpom",
    "align-fpo.csv",
    "metrics.csv",
];

/// Names of artifacts that differ between two run directories.
pub fn differing_artifacts(a: &Path, b: &Path) -> Vec<&'static str> {
    DETERMINISTIC
        .into_iter()
        .filter(|n| std::fs::read(a.join(n)).ok() != std::fs::read(b.join(n)).ok() || !a.join(n).is_file())
        .collect()
}
