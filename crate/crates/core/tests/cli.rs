use std::path::Path;
use std::process::{Command, Output};

fn gsnias(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsnias")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = gsnias(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for p in [&a, &b] {
        ok(&["synth", "--seed", "7", "--items", "200", "--categories", "5", "--sessions", "300", "--out", s(p)]);
    }
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    assert!(bytes.starts_with(b"session_id,item_id,timestamp\n"));

    let c = dir.path().join("c.csv");
    ok(&["synth", "--seed", "8", "--sessions", "300", "--out", s(&c)]);
    assert_ne!(bytes, std::fs::read(&c).unwrap());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(gsnias(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(gsnias(&["entropy", "--bogus"]).status.code(), Some(2));
    assert_eq!(gsnias(&[]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "colour = blue\n").unwrap();
    let out = gsnias(&["--config", s(&cfg), "entropy", "--data", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

#[test]
fn missing_input_exits_1() {
    let out = gsnias(&["entropy", "--data", "/nonexistent/sessions.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn entropy_prints_sorted_top_lines() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    ok(&["synth", "--sessions", "200", "--out", s(&data)]);
    let text = ok(&["entropy", "--data", s(&data), "--top", "10"]);
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 10);
    let values: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(values.windows(2).all(|w| w[0] >= w[1]));
    assert!(rows.iter().all(|r| r.len() == 3));
}

#[test]
fn pipeline_train_evaluate_dump() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    ok(&["synth", "--items", "40", "--categories", "4", "--sessions", "300", "--out", s(&p("data.csv"))]);
    ok(&[
        "preprocess", "--data", s(&p("data.csv")), "--min-item-freq", "2",
        "--out", s(&p("train.txt")), "--test-out", s(&p("test.csv")),
    ]);
    // the lines format is chosen by extension
    let train_text = std::fs::read_to_string(p("train.txt")).unwrap();
    assert!(train_text.lines().next().unwrap().contains('\t'));

    ok(&["build-graph", "--data", s(&p("train.txt")), "--window", "2", "--out", s(&p("graph.tsv"))]);
    assert!(!std::fs::read_to_string(p("graph.tsv")).unwrap().is_empty());

    let cfg = format!(
        "# small run\ndim = 8\nanchors = 5\nlayers = 1\nepochs = 1\ndata = {}\ncheckpoint = {}\nout = {}\n",
        s(&p("train.txt")),
        s(&p("model.ckpt")),
        s(dir.path())
    );
    std::fs::write(p("run.cfg"), cfg).unwrap();
    // flag beats config file
    ok(&["--config", s(&p("run.cfg")), "train", "--epochs", "2"]);
    let ckpt = std::fs::read(p("model.ckpt")).unwrap();
    assert!(ckpt.starts_with(b"GSNIAS1\n"));
    let manifest = String::from_utf8_lossy(&ckpt[..ckpt.len().min(2000)]).to_string();
    assert!(manifest.contains("config epochs 2\n"));
    assert!(manifest.contains("config dim 8\n"));

    let metrics = ok(&["--config", s(&p("run.cfg")), "evaluate", "--test", s(&p("test.csv"))]);
    let keys: Vec<&str> = metrics.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(
        keys,
        ["hr@20", "mrr@20", "pop_hr@20", "pop_mrr@20", "spop_hr@20", "spop_mrr@20", "n_evaluated", "n_skipped"]
    );
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p("metrics.json")).unwrap()).unwrap();
    assert_eq!(summary["cutoff"], 20);
    assert!(summary["model"]["hr"].as_f64().unwrap() >= summary["model"]["mrr"].as_f64().unwrap());

    ok(&["dump-embeddings", "--checkpoint", s(&p("model.ckpt")), "--out", s(&p("emb.txt"))]);
    let emb = std::fs::read_to_string(p("emb.txt")).unwrap();
    let mut lines = emb.lines();
    let header: Vec<usize> = lines.next().unwrap().split(' ').map(|x| x.parse().unwrap()).collect();
    assert_eq!(header[1], 8);
    assert_eq!(lines.count(), header[0]);
}
