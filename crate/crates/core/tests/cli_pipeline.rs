mod common;

use common::{differing_artifacts, fpo_lab, set, staged_pipeline};
use fpo_lab::cli::Manifest;

fn code(o: &std::process::Output) -> Option<i32> {
    o.status.code()
}

#[test]
fn staged_pipeline_is_deterministic_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    staged_pipeline(a.path(), "fpo", "1");
    staged_pipeline(b.path(), "fpo", "3");
    assert_eq!(differing_artifacts(a.path(), b.path()), Vec::<&str>::new());

    let text = std::fs::read_to_string(a.path().join("manifest-align.json")).unwrap();
    let m: Manifest = serde_json::from_str(&text).unwrap();
    assert_eq!(m.inputs.len(), 4);
    assert!(m.artifacts.iter().any(|r| r.path.ends_with("policy-fpo.fpom")));
    assert_eq!(m.config.lab.align.loss.k, 8);

    // the sweep path reproduces the staged evaluation of the final policy
    let mut extra = vec!["--set".to_string(), "sweep.seeds=[0]".to_string()];
    extra.extend(["--set".to_string(), "sweep.methods=[\"fpo\"]".to_string()]);
    let o = fpo_lab("sweep", a.path(), &extra);
    assert_eq!(code(&o), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let grid = std::fs::read_to_string(a.path().join("grid.csv")).unwrap();
    let metrics = std::fs::read_to_string(a.path().join("metrics.csv")).unwrap();
    let tail = |line: &str| line.split(',').skip(6).collect::<Vec<_>>().join(",");
    let staged = tail(metrics.lines().nth(1).unwrap());
    let last = tail(grid.lines().last().unwrap());
    assert_eq!(staged, last);
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path();
    assert_eq!(code(&fpo_lab("gen-data", out, &[])), Some(0));

    // schema violation
    let o = fpo_lab("gen-data", out, &["--set".into(), "lab.bogus=1".into()]);
    assert_eq!(code(&o), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "config");

    // fpo alignment without a cache names the missing field
    let o = fpo_lab("align", out, &set("paths.pairs", &out.join("pairs_train.jsonl")));
    assert_eq!(code(&o), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("paths."));

    // cache built against one dictionary, alignment with another
    let f = |n: &str| out.join(n);
    assert_eq!(code(&fpo_lab("train-sft", out, &set("paths.corpus", &f("corpus.jsonl")))), Some(0));
    let mut a = set("paths.corpus", &f("corpus.jsonl"));
    a.extend(set("paths.reference", &f("reference.fpom")));
    assert_eq!(code(&fpo_lab("train-sae", out, &a)), Some(0));
    let mut a = set("paths.pairs", &f("pairs_train.jsonl"));
    a.extend(set("paths.reference", &f("reference.fpom")));
    a.extend(set("paths.sae", &f("sae.fpos")));
    assert_eq!(code(&fpo_lab("precompute-ref", out, &a)), Some(0));
    let other = out.join("other");
    let mut a = set("paths.corpus", &f("corpus.jsonl"));
    a.extend(set("paths.reference", &f("reference.fpom")));
    a.extend(["--seed".into(), "7".into()]);
    assert_eq!(code(&fpo_lab("train-sae", &other, &a)), Some(0));
    let mut a = vec!["--method".to_string(), "fpo".to_string()];
    a.extend(set("paths.pairs", &f("pairs_train.jsonl")));
    a.extend(set("paths.reference", &f("reference.fpom")));
    a.extend(set("paths.sae", &other.join("sae.fpos")));
    a.extend(set("paths.cache", &f("ref_cache.fpoc")));
    assert_eq!(code(&fpo_lab("align", out, &a)), Some(3));

    // an absurd learning rate overflows
    let mut a = vec!["--method".to_string(), "dpo".to_string()];
    a.extend(set("paths.pairs", &f("pairs_train.jsonl")));
    a.extend(set("paths.reference", &f("reference.fpom")));
    a.extend(["--set".into(), "lab.align.optimizer.lr=1e30".into()]);
    a.extend(["--set".into(), "lab.align.optimizer.clip_norm=0".into()]);
    assert_eq!(code(&fpo_lab("align", out, &a)), Some(4));

    let o = common::fpo_lab_threads("gen-data", out, &[], "0");
    assert_eq!(code(&o), Some(2));
}
