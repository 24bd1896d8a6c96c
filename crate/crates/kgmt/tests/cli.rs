//! The `kgmt` binary end to end on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kgmt::cli::{Prediction, Retrieval};
use kgmt::core::records::{BenchmarkInstance, GoldEntity};
use kgmt::io::{read_json, write_jsonl, BENCHMARK_FILE, CONTROL_FILE, KG_FILE, RETRIEVER_FILE, TRANSLATION_FILE};
use kgmt::manifest::{RunManifest, MANIFEST_FILE};
use tempfile::{tempdir, TempDir};

const TINY: &str = r#"{
  "synth": {"entities": 200, "train_examples": 150, "benchmark_size": 20, "control_size": 5},
  "encoder": {"dim": 16, "layers": 1, "heads": 2, "ffn_dim": 32},
  "model": {"dim": 16, "enc_layers": 1, "dec_layers": 1, "heads": 2, "ffn_dim": 32},
  "retriever": {"epochs": 1},
  "translator": {"epochs": 1},
  "modes": ["none", "both"],
  "random_negative_ablation": false
}"#;

fn kgmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kgmt")).args(args).env("KGMT_LOG", "info").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = kgmt(args);
    assert!(out.status.success(), "kgmt {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Work {
    dir: TempDir,
    config: PathBuf,
}

impl Work {
    fn new() -> Self {
        let dir = tempdir().unwrap();
        let config = dir.path().join("tiny.json");
        fs::write(&config, TINY).unwrap();
        Self { dir, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, out: &str, args: &[&str]) -> Output {
        let out = self.path(out);
        let mut all = vec!["--config", s(&self.config), "--out", s(&out)];
        all.extend_from_slice(args);
        ok(&all)
    }

    fn gen(&self, out: &str) -> PathBuf {
        self.run(out, &["gen"]);
        self.path(out)
    }
}

fn manifest(dir: &Path) -> RunManifest {
    read_json(&dir.join(MANIFEST_FILE)).unwrap()
}

#[test]
fn gen_writes_the_suite_and_a_manifest() {
    let w = Work::new();
    let suite = w.gen("suite");
    for f in [KG_FILE, RETRIEVER_FILE, TRANSLATION_FILE, BENCHMARK_FILE, CONTROL_FILE] {
        assert!(suite.join(f).is_file(), "{f} missing");
    }
    let m = manifest(&suite);
    assert_eq!(m.command, "gen");
    assert_eq!(m.seed, 42);
    assert_eq!(m.config.synth.entities, 200);
    assert!(m.outputs.iter().any(|h| h.path.ends_with(KG_FILE) && h.sha256.len() == 64));
}

#[test]
fn same_seed_gives_identical_files() {
    let w = Work::new();
    let (a, b) = (w.gen("a"), w.gen("b"));
    ok(&["--config", s(&w.config), "--seed", "7", "--out", s(&w.path("c")), "gen"]);
    for f in [KG_FILE, RETRIEVER_FILE, TRANSLATION_FILE, BENCHMARK_FILE, CONTROL_FILE] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(a.join(BENCHMARK_FILE)).unwrap(), fs::read(w.path("c").join(BENCHMARK_FILE)).unwrap());
    let hashes = |d: &Path| manifest(d).outputs.into_iter().map(|h| h.sha256).collect::<Vec<_>>();
    assert_eq!(hashes(&a), hashes(&b));
    assert_eq!(manifest(&w.path("c")).seed, 7);
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempdir().unwrap();
    let out = kgmt(&["--config", s(&dir.path().join("nope.json")), "--out", s(dir.path()), "gen"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nope.json") && err.contains("Usage"), "{err}");
    assert!(!dir.path().join(KG_FILE).exists());
}

#[test]
fn missing_artifacts_name_the_producing_command() {
    let w = Work::new();
    let out = kgmt(&["--out", s(&w.path("r")), "train-retriever", "--suite", s(&w.path("nowhere"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("kgmt gen"));

    let suite = w.gen("suite");
    let out = kgmt(&["--out", s(&w.path("t")), "translate", "--suite", s(&suite), "--translator", s(&w.path("no-mt")), "--mode", "none", "--text", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("kgmt train-mt"));

    let out = kgmt(&["--out", s(&w.path("i")), "index", "--suite", s(&suite), "--retriever", s(&w.path("no-r"))]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("kgmt train-retriever"));

    let out = kgmt(&["eval", "--predictions", s(&w.path("none.jsonl")), "--benchmark", s(&suite.join(BENCHMARK_FILE))]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("kgmt translate"));
}

#[test]
fn eval_scores_a_perfect_system_at_one() {
    let dir = tempdir().unwrap();
    let bench = vec![
        BenchmarkInstance { source: "wer ist Merkur ?".into(), references: vec!["who is Mercury ?".into()], entities: vec![GoldEntity { id: "Q1".into(), names_tgt: vec!["Mercury".into()] }] },
        BenchmarkInstance { source: "guten Tag".into(), references: vec!["good day".into(), "hello".into()], entities: vec![] },
    ];
    let preds: Vec<Prediction> = bench.iter().map(|b| Prediction { source: b.source.clone(), translation: b.references[0].clone(), pairs: vec![] }).collect();
    let (bp, pp) = (dir.path().join("bench.jsonl"), dir.path().join("pred.jsonl"));
    write_jsonl(&bp, &bench).unwrap();
    write_jsonl(&pp, &preds).unwrap();
    let out = ok(&["--out", s(&dir.path().join("ev")), "eval", "--predictions", s(&pp), "--benchmark", s(&bp)]);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["m_eta"], 1.0);
    assert_eq!(summary["bleu"], 1.0);
    let report: serde_json::Value = read_json(&dir.path().join("ev").join("report.json")).unwrap();
    assert_eq!(report["m_eta"], 1.0);
    assert_eq!(report["n_entity_instances"], 1);
}

#[test]
fn full_pipeline_through_the_binary() {
    let w = Work::new();
    let suite = w.gen("suite");
    w.run("retriever", &["train-retriever", "--suite", s(&suite)]);
    assert_eq!(manifest(&w.path("retriever")).command, "train-retriever");
    w.run("index", &["index", "--suite", s(&suite), "--retriever", s(&w.path("retriever"))]);
    let index = w.path("index").join("index.bin");
    assert!(index.is_file());

    // Default k is 3: three ranked, scored entities per query.
    let out = ok(&["retrieve", "--retriever", s(&w.path("retriever")), "--index", s(&index), "--suite", s(&suite), "--query", "a b c", "--query", "d"]);
    let lines: Vec<Retrieval> = String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for r in &lines {
        assert_eq!(r.results.len(), 3);
        assert!(r.results.windows(2).all(|p| p[0].score >= p[1].score));
        assert!(r.results.iter().all(|e| e.name_src.is_some() && e.name_tgt.is_some()));
    }

    let retriever = w.path("retriever");
    let mt = w.path("mt");
    let knowledge = ["--retriever", s(&retriever), "--index", s(&index)];
    let mut train = vec!["train-mt", "--suite", s(&suite), "--mode", "both"];
    train.extend_from_slice(&knowledge);
    w.run("mt", &train);
    let bench = suite.join(BENCHMARK_FILE);
    let mut tr = vec!["translate", "--suite", s(&suite), "--translator", s(&mt), "--mode", "both", "--input", s(&bench)];
    tr.extend_from_slice(&knowledge);
    w.run("tr", &tr);
    let preds: Vec<Prediction> = fs::read_to_string(w.path("tr").join("translations.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(preds.len(), 20);
    assert!(preds.iter().all(|p| p.pairs.len() <= 3 && p.pairs.iter().all(|e| e.score.is_some())));
    let line: serde_json::Value = serde_json::from_str(fs::read_to_string(w.path("tr").join("translations.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    for key in ["id", "name_src", "name_tgt", "score"] {
        assert!(line["entities"][0].get(key).is_some(), "{key} missing from {line}");
    }

    w.run("ev", &["eval", "--predictions", s(&w.path("tr").join("translations.jsonl")), "--benchmark", s(&bench)]);
    let report: serde_json::Value = read_json(&w.path("ev").join("report.json")).unwrap();
    assert!(report["m_eta"].as_f64().is_some_and(|m| (0.0..=1.0).contains(&m)));
    assert!(report["hits"]["1"].is_number());

    // --k means nothing without knowledge.
    w.run("none", &["train-mt", "--suite", s(&suite), "--mode", "none"]);
    let out = w.run("tr-none", &["translate", "--suite", s(&suite), "--translator", s(&w.path("none")), "--mode", "none", "--k", "5", "--text", "a b"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--k is ignored"));

    // The experiment table: every mode with both knowledge sources.
    let out = w.run("exp", &["experiment", "--suite", s(&suite)]);
    let table = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = table.lines().filter(|l| l.starts_with("| none") || l.starts_with("| both")).collect();
    assert_eq!(rows.len(), 4, "{table}");
    for r in rows.iter().filter(|r| r.contains("| gold |")) {
        assert!(r.matches("n/a").count() == 2, "{r}");
    }
    assert!(w.path("exp").join(MANIFEST_FILE).is_file());
}
