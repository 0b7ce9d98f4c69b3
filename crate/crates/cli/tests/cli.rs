use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use knnlab_core::eval::{evaluate, EvalReport};
use knnlab_core::store::{ContextDump, Datastore, OutputEmbedding};
use knnlab_core::{HeadConfig, HeadModels};

fn knnlab(args: &[&str]) -> Output {
    knnlab_env(args, &[])
}

fn knnlab_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_knnlab"));
    cmd.args(args).env_remove("KNNLAB_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small synthetic corpus plus a datastore.
fn corpus(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&knnlab(&[
        "gen-synth", "--seed", "7", "--n-train", "3000", "--n-eval", "300", "--out", s(&data),
    ]));
    ok(&knnlab(&[
        "build-dstore",
        "--dump",
        s(&data.join("train.dump")),
        "--view",
        "att",
        "--out",
        s(&data),
    ]));
    data
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = knnlab(&["eval", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--no-such-flag") && err.contains("Usage"), "{err}");
    assert_eq!(knnlab(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(knnlab(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_config_is_a_data_error() {
    let out = knnlab(&["eval", "--config", "missing.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
}

#[test]
fn stochastic_steps_need_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = knnlab(&["gen-synth", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
}

#[test]
fn gen_synth_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let files = ["output.bin", "train.dump", "eval.dump", "vocab.txt", "synth.json", "manifest.json"];
    // same output directory both times: the manifest echoes `out`
    let mut runs = Vec::new();
    for threads in ["1", "4"] {
        ok(&knnlab_env(
            &["gen-synth", "--seed", "7", "--n-train", "500", "--n-eval", "50", "--out", s(&a)],
            &[("KNNLAB_THREADS", threads)],
        ));
        runs.push(files.map(|f| std::fs::read(a.join(f)).unwrap()));
    }
    for (i, f) in files.iter().enumerate() {
        assert_eq!(runs[0][i], runs[1][i], "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen-synth");
    assert_eq!(manifest["seeds"]["synth"], 7);
    assert_eq!(manifest["artifacts"].as_array().unwrap().len(), 5);
    assert_eq!(manifest["artifacts"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn eval_matches_the_library_call() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let out = dir.path().join("eval");
    ok(&knnlab(&[
        "eval",
        "--model",
        s(&data.join("output.bin")),
        "--datastore",
        s(&data.join("datastore.bin")),
        "--eval",
        s(&data.join("eval.dump")),
        "--k",
        "16",
        "--lambda",
        "0.3",
        "--out",
        s(&out),
    ]));
    let cli = EvalReport::read_json(&out.join("report.json")).unwrap();

    let output = OutputEmbedding::read(&data.join("output.bin")).unwrap();
    let ds = Datastore::read(&data.join("datastore.bin")).unwrap();
    let dump = ContextDump::read(&data.join("eval.dump")).unwrap();
    let cfg = HeadConfig {
        k: 16,
        lambda: 0.3,
        ..HeadConfig::default()
    };
    let models = HeadModels {
        datastore: Some(&ds),
        ..HeadModels::new(&output)
    };
    let lib = evaluate(&dump, &cfg, &models).unwrap();
    assert_eq!(cli, lib);
    let csv = std::fs::read_to_string(out.join("tokens.csv")).unwrap();
    assert_eq!(csv.lines().count(), dump.len() + 1);
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let cfg = dir.path().join("exp.json");
    let doc = serde_json::json!({
        "paths": {
            "model": data.join("output.bin"),
            "datastore": data.join("datastore.bin"),
            "eval": data.join("eval.dump"),
        },
        "head": {"k": 8, "lambda": 0.5},
    });
    std::fs::write(&cfg, doc.to_string()).unwrap();
    let out = dir.path().join("eval");
    ok(&knnlab(&["eval", "--config", s(&cfg), "--k", "4", "--set", "head.tau=2.0", "--out", s(&out)]));
    let report = EvalReport::read_json(&out.join("report.json")).unwrap();
    assert_eq!(report.config["k"], 4);
    assert_eq!(report.config["tau"], 2.0);
    assert_eq!(report.lambda, 0.5);
}

#[test]
fn tau_sweep_writes_thirty_rows_and_a_plot() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let out = dir.path().join("sweep");
    ok(&knnlab(&[
        "sweep",
        "--axis",
        "tau",
        "--grid",
        "0.1:3.0:0.1",
        "--model",
        s(&data.join("output.bin")),
        "--datastore",
        s(&data.join("datastore.bin")),
        "--eval",
        s(&data.join("eval.dump")),
        "--k",
        "16",
        "--out",
        s(&out),
    ]));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "axis_value,interp_ppl,lambda_star");
    assert_eq!(lines.len(), 31);
    assert!(lines[1].starts_with("0.1,") && lines[30].starts_with("3,"));
    let svg = std::fs::read_to_string(out.join("sweep.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("<polyline"));

    let bad = knnlab(&["sweep", "--axis", "temperature", "--grid", "1", "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(1));
    let bad = knnlab(&["sweep", "--axis", "tau", "--grid", "3:1:0.1", "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn index_search_and_regimes() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    ok(&knnlab(&[
        "build-index",
        "--seed",
        "1",
        "--datastore",
        s(&data.join("datastore.bin")),
        "--n-list",
        "8",
        "--out",
        s(&data),
    ]));
    let mut csvs = Vec::new();
    for mask in ["exact", "approx"] {
        let out = dir.path().join(mask);
        ok(&knnlab(&[
            "search",
            "--datastore",
            s(&data.join("datastore.bin")),
            "--index",
            s(&data.join("index.bin")),
            "--queries",
            s(&data.join("eval.dump")),
            "--k",
            "5",
            "--mask",
            mask,
            "--n-probe",
            "8",
            "--limit",
            "20",
            "--out",
            s(&out),
        ]));
        csvs.push(std::fs::read_to_string(out.join("neighbors.csv")).unwrap());
    }
    // all lists probed and no PQ: identical neighbors and scores
    assert_eq!(csvs[0], csvs[1]);
    assert_eq!(csvs[0].lines().count(), 20 * 5 + 1);
}

#[test]
fn corrupt_inputs_report_file_and_offset() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let path = data.join("datastore.bin");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&path, bytes).unwrap();
    let out = knnlab(&["subsample", "--seed", "1", "--datastore", s(&path), "--fraction", "0.5", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("datastore.bin") && err.contains("at byte 0"), "{err}");
}

#[test]
fn heads_and_analysis() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let head = dir.path().join("head");
    ok(&knnlab(&[
        "train-head",
        "--type",
        "learned",
        "--seed",
        "3",
        "--model",
        s(&data.join("output.bin")),
        "--train",
        s(&data.join("train.dump")),
        "--epochs",
        "3",
        "--lr",
        "0.01",
        "--out",
        s(&head),
    ]));
    let trace = std::fs::read_to_string(head.join("trace.csv")).unwrap();
    assert!(trace.starts_with("epoch,loss,dev_ppl\n"));

    let mut reports = Vec::new();
    for (name, kind, extra) in [("knn", "knn", None), ("learned", "learned", Some(head.join("head.bin")))] {
        let out = dir.path().join(name);
        let mut args = vec![
            "eval".to_string(),
            "--kind".into(),
            kind.into(),
            "--model".into(),
            s(&data.join("output.bin")).into(),
            "--datastore".into(),
            s(&data.join("datastore.bin")).into(),
            "--eval".into(),
            s(&data.join("eval.dump")).into(),
            "--k".into(),
            "16".into(),
            "--out".into(),
            s(&out).into(),
        ];
        if let Some(h) = extra {
            args.extend(["--head".into(), s(&h).into()]);
        }
        ok(&knnlab(&args.iter().map(String::as_str).collect::<Vec<_>>()));
        reports.push(out.join("report.json"));
    }

    let out = dir.path().join("analysis");
    ok(&knnlab(&[
        "analyze",
        "--report-a",
        s(&reports[0]),
        "--report-b",
        s(&reports[1]),
        "--vocab",
        s(&data.join("vocab.txt")),
        "--out",
        s(&out),
    ]));
    let csv = std::fs::read_to_string(out.join("token_stats.csv")).unwrap();
    assert!(csv.starts_with("id,token,count,help_rate_a,help_rate_b,delta,length,h_fwd,h_bwd\n"));
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("analysis.json")).unwrap()).unwrap();
    assert!(meta["bigrams"].as_str().unwrap().contains("within-document"));

    let (model, train, dstore) = (data.join("output.bin"), data.join("train.dump"), data.join("datastore.bin"));
    for (ty, extra) in [("mos", vec!["--components", "2"]), ("cluster", vec!["--n-centroids", "32"])] {
        let out = dir.path().join(ty);
        let mut args = vec![
            "train-head",
            "--type",
            ty,
            "--seed",
            "3",
            "--model",
            s(&model),
            "--train",
            s(&train),
            "--datastore",
            s(&dstore),
            "--epochs",
            "1",
            "--out",
            s(&out),
        ];
        args.extend(extra);
        ok(&knnlab(&args));
        assert!(out.join("head.bin").exists());
    }
}
