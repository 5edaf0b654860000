//! End-to-end CLI behavior through the real binary: exit codes, artifact
//! determinism, and the cross-command pipeline on a miniature corpus.

use std::path::PathBuf;
use std::process::{Command, Output};

use once_cell::sync::Lazy;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_eaglepc"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

/// A tiny pipeline shared by the read-only assertions below.
struct Pipeline {
    #[allow(dead_code)]
    dir: tempfile::TempDir,
    corpus: PathBuf,
    theta0: PathBuf,
    retrain: PathBuf,
    report_model: PathBuf,
    report_retrain: PathBuf,
}

static PIPELINE: Lazy<Pipeline> = Lazy::new(|| {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let small = |extra: &mut Vec<String>| {
        extra.extend(
            [
                "--set",
                "arch.d_model=16",
                "--set",
                "arch.layers=1",
                "--set",
                "corpus.facts_entities=4",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
    };

    let corpus_dir = root.join("corpus");
    let mut args = vec![
        "gen-corpus".to_string(),
        "--out".into(),
        corpus_dir.display().to_string(),
        "--seed".into(),
        "5".into(),
        "--entities".into(),
        "8".into(),
        "--qa-per-entity".into(),
        "3".into(),
        "--forget-ratio".into(),
        "0.25".into(),
        "--holdout-entities".into(),
        "2".into(),
    ];
    small(&mut args);
    assert_ok(&bin().args(&args).output().unwrap());
    let corpus = corpus_dir.join("corpus.jsonl");

    let theta0_dir = root.join("theta0");
    let mut args = vec![
        "finetune".to_string(),
        "--corpus".into(),
        corpus.display().to_string(),
        "--out".into(),
        theta0_dir.display().to_string(),
        "--epochs".into(),
        "6".into(),
    ];
    small(&mut args);
    assert_ok(&bin().args(&args).output().unwrap());

    let retrain_dir = root.join("retrain");
    let mut args = vec![
        "retrain".to_string(),
        "--corpus".into(),
        corpus.display().to_string(),
        "--out".into(),
        retrain_dir.display().to_string(),
        "--epochs".into(),
        "6".into(),
    ];
    small(&mut args);
    assert_ok(&bin().args(&args).output().unwrap());

    let unlearn_dir = root.join("unlearn");
    let mut args = vec![
        "unlearn".to_string(),
        "--corpus".into(),
        corpus.display().to_string(),
        "--ckpt".into(),
        theta0_dir.join("model.ckpt").display().to_string(),
        "--out".into(),
        unlearn_dir.display().to_string(),
        "--opt".into(),
        "npo+gd".into(),
        "--eagle".into(),
        "on".into(),
        "--k".into(),
        "1".into(),
        "--mu".into(),
        "0.005".into(),
        "--penalty-mode".into(),
        "cap".into(),
        "--epochs".into(),
        "2".into(),
        "--m".into(),
        "4".into(),
        "--n".into(),
        "4".into(),
    ];
    small(&mut args);
    assert_ok(&bin().args(&args).output().unwrap());

    let eval_model = root.join("eval-model");
    let mut args = vec![
        "eval".to_string(),
        "--corpus".into(),
        corpus.display().to_string(),
        "--ckpt".into(),
        unlearn_dir.join("model.ckpt").display().to_string(),
        "--retrain-ckpt".into(),
        retrain_dir.join("model.ckpt").display().to_string(),
        "--out".into(),
        eval_model.display().to_string(),
        "--label".into(),
        "eagle-pc(npo+gd)".into(),
    ];
    small(&mut args);
    assert_ok(&bin().args(&args).output().unwrap());

    let eval_retrain = root.join("eval-retrain");
    let mut args = vec![
        "eval".to_string(),
        "--corpus".into(),
        corpus.display().to_string(),
        "--ckpt".into(),
        retrain_dir.join("model.ckpt").display().to_string(),
        "--retrain-ckpt".into(),
        retrain_dir.join("model.ckpt").display().to_string(),
        "--out".into(),
        eval_retrain.display().to_string(),
        "--label".into(),
        "retrain".into(),
    ];
    small(&mut args);
    assert_ok(&bin().args(&args).output().unwrap());

    Pipeline {
        corpus,
        theta0: theta0_dir.join("model.ckpt"),
        retrain: retrain_dir.join("model.ckpt"),
        report_model: eval_model.join("report.json"),
        report_retrain: eval_retrain.join("report.json"),
        dir,
    }
});

#[test]
fn unknown_subcommand_and_flag_exit_with_usage_code() {
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["gen-corpus", "--out", "/tmp/x", "--no-such-flag"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn unknown_config_key_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen-corpus",
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "corpus.nope=1",
    ]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("corpus.nope"), "{err}");
}

#[test]
fn gen_corpus_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_ok(&run(&[
            "gen-corpus",
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "42",
            "--entities",
            "6",
            "--qa-per-entity",
            "2",
            "--forget-ratio",
            "0.2",
            "--holdout-entities",
            "1",
        ]));
    }
    for name in ["corpus.jsonl", "worldfacts.jsonl", "manifest.json"] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }
}

#[test]
fn eval_against_self_has_forget_quality_one() {
    let p = &*PIPELINE;
    let text = std::fs::read_to_string(&p.report_retrain).unwrap();
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(report["forget_quality"]["p"], 1.0);
    assert_eq!(report["forget_quality"]["d"], 0.0);
    assert_eq!(report["muse"]["priv_leak"], 0.0);
}

#[test]
fn compare_renders_tables_with_retrain_first() {
    let p = &*PIPELINE;
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&run(&[
        "compare",
        "--out",
        dir.path().to_str().unwrap(),
        p.report_model.to_str().unwrap(),
        p.report_retrain.to_str().unwrap(),
    ]));
    let table = std::fs::read_to_string(dir.path().join("table.md")).unwrap();
    let retrain_pos = table.find("| retrain |").expect("retrain row");
    let model_pos = table.find("| eagle-pc(npo+gd) |").expect("model row");
    assert!(retrain_pos < model_pos, "retrain row must come first");
    assert!(table.contains("C1 VerbMem"));
}

#[test]
fn compare_rejects_corpus_mismatch_and_missing_files() {
    let p = &*PIPELINE;
    let dir = tempfile::tempdir().unwrap();
    // Tamper with the corpus hash of one report.
    let mut report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&p.report_model).unwrap()).unwrap();
    report["corpus_hash"] = serde_json::Value::String("deadbeef".into());
    let forged = dir.path().join("forged.json");
    std::fs::write(&forged, serde_json::to_string(&report).unwrap()).unwrap();
    let out = run(&[
        "compare",
        "--out",
        dir.path().to_str().unwrap(),
        forged.to_str().unwrap(),
        p.report_retrain.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("corpus hash mismatch"));

    let missing = dir.path().join("missing.json");
    let out = run(&[
        "compare",
        "--out",
        dir.path().to_str().unwrap(),
        missing.to_str().unwrap(),
        p.report_retrain.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
}

#[test]
fn unlearn_rejects_checkpoint_from_other_corpus() {
    let p = &*PIPELINE;
    let dir = tempfile::tempdir().unwrap();
    let other = dir.path().join("other");
    assert_ok(&run(&[
        "gen-corpus",
        "--out",
        other.to_str().unwrap(),
        "--seed",
        "123",
        "--entities",
        "6",
        "--qa-per-entity",
        "2",
        "--forget-ratio",
        "0.2",
        "--holdout-entities",
        "1",
    ]));
    let out = run(&[
        "unlearn",
        "--corpus",
        other.join("corpus.jsonl").to_str().unwrap(),
        "--ckpt",
        p.theta0.to_str().unwrap(),
        "--out",
        dir.path().join("u").to_str().unwrap(),
        "--opt",
        "ga",
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("different corpus"));
}

#[test]
fn memscore_emits_pairs_and_spearman() {
    let p = &*PIPELINE;
    let dir = tempfile::tempdir().unwrap();
    let mem_dir = dir.path().join("mem");
    assert_ok(&run(&[
        "memscore",
        "--corpus",
        p.corpus.to_str().unwrap(),
        "--ckpt",
        p.theta0.to_str().unwrap(),
        "--out",
        mem_dir.to_str().unwrap(),
        "--records",
        "3",
        "--seeds",
        "2",
        "--set",
        "mem.epochs=1",
        "--set",
        "mem.d_model=16",
    ]));
    let text = std::fs::read_to_string(mem_dir.join("memscore.json")).unwrap();
    let mem: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(mem["kind"], "memscore");
    assert_eq!(mem["samples"].as_array().unwrap().len(), 3);
    assert!(mem["spearman"].is_number());

    // Compare merges the memscore file into the table and pair CSV.
    let cmp = dir.path().join("cmp");
    assert_ok(&run(&[
        "compare",
        "--out",
        cmp.to_str().unwrap(),
        p.report_retrain.to_str().unwrap(),
        mem_dir.join("memscore.json").to_str().unwrap(),
    ]));
    let pairs = std::fs::read_to_string(cmp.join("fig2_pairs.csv")).unwrap();
    assert_eq!(pairs.lines().count(), 4);
    assert!(pairs.starts_with("method,id,effective_weight,mem_score"));
    let table = std::fs::read_to_string(cmp.join("table.md")).unwrap();
    assert!(table.contains("Spearman"));
}

#[test]
fn rerunning_unlearn_reproduces_artifacts_byte_for_byte() {
    let p = &*PIPELINE;
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_ok(&run(&[
            "unlearn",
            "--corpus",
            p.corpus.to_str().unwrap(),
            "--ckpt",
            p.theta0.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--opt",
            "ga",
            "--eagle",
            "on",
            "--mu",
            "0.001",
            "--epochs",
            "1",
            "--m",
            "3",
        ]));
    }
    for name in ["model.ckpt", "steps.csv", "weights.csv", "manifest.json", "proxies.jsonl"] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }
    let _ = &p.retrain;
}
