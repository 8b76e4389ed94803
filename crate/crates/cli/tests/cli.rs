use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_scanpath"));
    c.arg("--threads").arg("1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn write_json(p: &Path, v: &Value) {
    fs::write(p, serde_json::to_string(v).unwrap()).unwrap()
}

fn policy() -> Value {
    json!({
        "vocab": ["aa", "b", "ccc", "dd", "eeeee", "f"],
        "classes": {"short": ["b", "f"]},
        "sentence_len": [4, 7],
        "policies": [{
            "start": {"+1": 1.0},
            "rules": [
                {"at": 1, "class": "$end", "dist": {"eos": 1.0}},
                {"at": 1, "class": "short", "first_pass": true, "dist": {"+2": 0.8, "+1": 0.2}}
            ],
            "default": {"+1": 0.8, "0": 0.1, "-1": 0.1}
        }]
    })
}

/// Synthetic corpus, split plan and tiny configurations in a fresh directory.
struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        write_json(&root.join("policy.json"), &policy());
        write_json(
            &root.join("model.json"),
            &json!({"embed_dim": 4, "bilstm_units": 3, "lstm_units": 4, "dense_units": [8, 8, 8, 8]}),
        );
        write_json(
            &root.join("train.json"),
            &json!({"max_epochs": 2, "batch_size": 16, "patience": 1, "lr": 0.003}),
        );
        let f = Self { _tmp: tmp, root };
        ok(&[
            "synth",
            "--policy",
            s(&f.p("policy.json")),
            "--readers",
            "4",
            "--sentences",
            "12",
            "--seed",
            "5",
            "--out",
            s(&f.p("corpus")),
        ]);
        ok(&[
            "split",
            "--corpus",
            s(&f.p("corpus")),
            "--kind",
            "new-sentence",
            "--folds",
            "3",
            "--seed",
            "1",
            "--out",
            s(&f.p("plan.json")),
        ]);
        f
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn fold_args(&self) -> Vec<String> {
        vec![
            "--corpus".into(),
            s(&self.p("corpus")).into(),
            "--plan".into(),
            s(&self.p("plan.json")).into(),
            "--fold".into(),
            "0".into(),
        ]
    }

    fn with_fold(&self, head: &[&str], tail: &[&str]) -> Output {
        let fold = self.fold_args();
        let mut args: Vec<&str> = head.to_vec();
        args.extend(fold.iter().map(String::as_str));
        args.extend_from_slice(tail);
        run(&args)
    }

    fn train(&self, out: &str) -> PathBuf {
        let dir = self.p(out);
        let o = self.with_fold(
            &["train"],
            &[
                "--config",
                s(&self.p("model.json")),
                "--train-config",
                s(&self.p("train.json")),
                "--out",
                s(&dir),
            ],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        dir
    }
}

#[test]
fn synth_writes_corpus_and_entropy() {
    let f = Fixture::new();
    let lines = fs::read_to_string(f.p("corpus/scanpaths.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 48);
    let info = read_json(&f.p("corpus/synth.json"));
    assert!(info["entropy"].as_f64().unwrap() > 0.0);
    assert!(f.p("corpus/manifest.json").exists());
}

#[test]
fn split_is_deterministic_and_records_a_manifest() {
    let f = Fixture::new();
    let again = f.p("plan2.json");
    ok(&[
        "split",
        "--corpus",
        s(&f.p("corpus")),
        "--kind",
        "new-sentence",
        "--folds",
        "3",
        "--seed",
        "1",
        "--out",
        s(&again),
    ]);
    assert_eq!(
        fs::read(f.p("plan.json")).unwrap(),
        fs::read(&again).unwrap()
    );
    let m = read_json(&f.p("plan.json.manifest.json"));
    assert_eq!(m["command"], "split");
    assert_eq!(m["seeds"]["split"], 1);
    assert_eq!(m["hashes"]["corpus.scanpaths"].as_str().unwrap().len(), 64);
}

#[test]
fn uniform_baseline_is_log_of_class_count() {
    let f = Fixture::new();
    let out = f.p("uniform.json");
    let o = f.with_fold(
        &["baseline", "--kind", "uniform"],
        &["--max-len", "7", "--out", s(&out)],
    );
    assert!(o.status.success());
    let r = read_json(&out);
    let expected = (2.0 * 7.0 + 1.0f64).ln();
    assert!((r["nll"]["mean"].as_f64().unwrap() - expected).abs() < 1e-12);

    let out = f.p("label.json");
    let o = f.with_fold(
        &["baseline", "--kind", "train-label-dist"],
        &["--out", s(&out)],
    );
    assert!(o.status.success());
    assert!(read_json(&out)["nll"]["mean"].as_f64().unwrap() < expected);
}

#[test]
fn train_eval_generate_inspect_round() {
    let f = Fixture::new();
    let dir = f.train("run");
    assert!(dir.join("model.eyckpt").exists());
    assert!(
        read_json(&dir.join("history.json"))["epochs"]
            .as_array()
            .unwrap()
            .len()
            <= 2
    );
    assert_eq!(read_json(&dir.join("manifest.json"))["precision"], "f32");

    let report = f.p("eval.json");
    let o = f.with_fold(
        &["eval", "--checkpoint", s(&dir)],
        &[
            "--metrics",
            "nll,nld,multimatch",
            "--seed",
            "3",
            "--out",
            s(&report),
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&report);
    assert!(r["nll"]["mean"].as_f64().unwrap().is_finite());
    let nld = r["nld"]["mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&nld));
    assert!(r["multimatch"].is_object());

    let gen = f.p("gen.jsonl");
    let sentences = f.p("corpus/sentences.jsonl");
    let args = [
        "generate",
        "--checkpoint",
        s(&dir),
        "--sentences",
        s(&sentences),
        "--samples",
        "3",
        "--seed",
        "9",
        "--out",
        s(&gen),
    ];
    ok(&args);
    let first = fs::read(&gen).unwrap();
    assert_eq!(String::from_utf8_lossy(&first).lines().count(), 36);
    ok(&args);
    assert_eq!(
        first,
        fs::read(&gen).unwrap(),
        "generation must be reproducible"
    );

    let heat = f.p("heat.csv");
    ok(&[
        "inspect",
        "--checkpoint",
        s(&dir),
        "--corpus",
        s(&f.p("corpus")),
        "--scanpath-id",
        "0",
        "--out",
        s(&heat),
    ]);
    assert!(fs::read_to_string(&heat).unwrap().lines().count() >= 2);

    let table = f.p("buckets.csv");
    let table_arg = table.clone();
    let fold = f.fold_args();
    let mut args: Vec<&str> = vec![
        "inspect",
        "--checkpoint",
        s(&dir),
        "--buckets",
        "...:-1,0,1,2:...,eos",
    ];
    args.extend(fold.iter().map(String::as_str));
    args.extend(["--out", s(&table_arg)]);
    ok(&args);
    let csv = fs::read_to_string(&table).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5, "header plus one row per bucket");
    assert!(csv.starts_with("bucket,steps,model,train_label_dist,uniform"));
}

#[test]
fn exit_codes_separate_usage_and_data_errors() {
    let f = Fixture::new();
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let missing = f.p("nope");
    let o = run(&[
        "split",
        "--corpus",
        s(&missing),
        "--kind",
        "new-reader",
        "--out",
        s(&f.p("x.json")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let dir = f.train("run");
    // A bucket list that leaves out range 0 is not a partition.
    let fold = f.fold_args();
    let mut args: Vec<&str> = vec![
        "inspect",
        "--checkpoint",
        s(&dir),
        "--buckets",
        "...:-1,1:...,eos",
    ];
    args.extend(fold.iter().map(String::as_str));
    assert_eq!(run(&args).status.code(), Some(1));
    let o = f.with_fold(
        &["eval", "--checkpoint", s(&dir)],
        &["--metrics", "bleu", "--out", s(&f.p("e.json"))],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ablate_trains_every_variant() {
    let f = Fixture::new();
    write_json(
        &f.p("grid.json"),
        &json!({"variants": [
            {"name": "full", "config": {}},
            {"name": "w/o word encoder", "config": {"use_word_encoder": false}},
            {"name": "w/o window", "config": {"window_mode": "global"}}
        ]}),
    );
    let out = f.p("ablation");
    let o = f.with_fold(
        &["ablate", "--grid", s(&f.p("grid.json"))],
        &[
            "--config",
            s(&f.p("model.json")),
            "--train-config",
            s(&f.p("train.json")),
            "--out",
            s(&out),
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_json(&out.join("ablation.json"));
    assert_eq!(rows.as_array().unwrap().len(), 3);
    assert!(rows[0]["ttest_vs_first"].is_null());
    assert!(rows[1]["ttest_vs_first"]["p"].is_number());
    for d in ["full", "w-o-word-encoder", "w-o-window"] {
        assert!(out.join(d).join("model.eyckpt").exists(), "{d}");
    }
    assert_eq!(
        fs::read_to_string(out.join("ablation.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );
}
