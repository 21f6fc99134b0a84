use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rgmoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rgmoe"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = rgmoe(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// gen -> attack -> train -> eval inside `root`, with short training.
fn pipeline(root: &Path) {
    let clean = root.join("clean");
    let bd = root.join("bd");
    ok(&[
        "gen",
        "--nodes",
        "150",
        "--classes",
        "3",
        "--dim",
        "8",
        "--homophily",
        "0.9",
        "--seed",
        "1",
        "-o",
        p(&clean),
    ]);
    ok(&[
        "attack",
        "-i",
        p(&clean),
        "-o",
        p(&bd),
        "--kind",
        "backdoor",
        "--seed",
        "3",
    ]);
    ok(&[
        "train",
        "-i",
        p(&bd),
        "--experts",
        "6",
        "--top-k",
        "2",
        "--hidden",
        "8",
        "--epochs",
        "15",
        "--router-epochs",
        "5",
        "--seed",
        "2",
        "--trace",
        p(&root.join("trace.csv")),
    ]);
    ok(&[
        "eval",
        "-i",
        p(&bd),
        "--report",
        p(&root.join("report.json")),
        "--per-expert-csv",
        p(&root.join("experts.csv")),
    ]);
}

#[test]
fn pipeline_outputs_and_schema() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    for f in ["meta.json", "edges.txt", "features.csv", "labels.txt", "split.json"] {
        assert!(dir.path().join("clean").join(f).exists(), "{f}");
    }
    assert!(!dir.path().join("clean/poison.json").exists());
    assert!(dir.path().join("bd/poison.json").exists());

    let report = json(&dir.path().join("report.json"));
    for key in [
        "asr",
        "clean_acc",
        "per_expert",
        "routing_robust_rate",
        "disagreement",
        "config",
    ] {
        assert!(report.get(key).is_some(), "{key}");
    }
    assert_eq!(report["per_expert"].as_array().unwrap().len(), 6);
    assert_eq!(report["config"]["n_experts"], 6);
    let asr = report["asr"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&asr));

    let csv = fs::read_to_string(dir.path().join("experts.csv")).unwrap();
    assert!(csv.starts_with("id,asr,acc_drop\n"));
    assert_eq!(csv.lines().count(), 7);
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(trace.starts_with("phase,epoch,"));
    assert_eq!(trace.lines().count(), 1 + 15 + 5);
}

#[test]
fn pipeline_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    for f in [
        "bd/checkpoint.json",
        "report.json",
        "experts.csv",
        "trace.csv",
        "bd/features.csv",
        "bd/poison.json",
    ] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn inspect_dumps_logic_and_disagreement() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let bd = dir.path().join("bd");
    let logic = dir.path().join("logic.csv");
    let dis = dir.path().join("dis.json");
    ok(&[
        "inspect",
        "-i",
        p(&bd),
        "--logic-csv",
        p(&logic),
        "--disagreement",
        p(&dis),
        "--report",
        p(&dir.path().join("i.json")),
    ]);
    let csv = fs::read_to_string(&logic).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("node,expert,neighbor,mi_value"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), 4);
    assert!(row[3].parse::<f64>().unwrap().is_finite());

    let d = json(&dis);
    let threshold = d["threshold"].as_f64().unwrap();
    let scores = d["scores"].as_array().unwrap();
    let nodes = d["nodes"].as_array().unwrap();
    let flagged: Vec<u64> = d["flagged"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    for (v, s) in nodes.iter().zip(scores) {
        let v = v.as_u64().unwrap();
        assert_eq!(s.as_f64().unwrap() > threshold, flagged.contains(&v));
    }
    assert!(d.get("precision").is_some() && d.get("recall").is_some());
}

#[test]
fn vanilla_checkpoint_has_no_discriminator() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g");
    ok(&["gen", "--nodes", "80", "--dim", "8", "-o", p(&g)]);
    ok(&[
        "train",
        "-i",
        p(&g),
        "--vanilla",
        "--experts",
        "4",
        "--hidden",
        "8",
        "--epochs",
        "3",
    ]);
    let out = rgmoe(&["inspect", "-i", p(&g), "--logic-csv", p(&dir.path().join("l.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    ok(&["inspect", "-i", p(&g), "--disagreement", p(&dir.path().join("d.json"))]);
    let report = {
        ok(&["eval", "-i", p(&g), "--report", p(&dir.path().join("r.json"))]);
        json(&dir.path().join("r.json"))
    };
    assert!(report["asr"].is_null());
}

#[test]
fn other_attack_kinds_run() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g");
    ok(&["gen", "--nodes", "100", "--dim", "8", "-o", p(&g)]);
    ok(&[
        "attack",
        "-i",
        p(&g),
        "-o",
        p(&dir.path().join("e")),
        "--kind",
        "edge",
        "--rate",
        "0.05",
        "--mode",
        "random",
    ]);
    ok(&[
        "attack",
        "-i",
        p(&g),
        "-o",
        p(&dir.path().join("n")),
        "--kind",
        "inject",
        "--inject-count",
        "5",
        "--edges-per-node",
        "3",
    ]);
    let ledger = json(&dir.path().join("n/poison.json"));
    assert_eq!(ledger["injected"].as_array().unwrap().len(), 5);
    // Poisoning a poisoned bundle is refused.
    let out = rgmoe(&["attack", "-i", p(&dir.path().join("n")), "-o", p(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g");

    let out = rgmoe(&["gen", "--bogus", "-o", p(&g)]);
    assert_eq!(out.status.code(), Some(64));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(rgmoe(&["frobnicate"]).status.code(), Some(64));
    assert_eq!(rgmoe(&[]).status.code(), Some(64));
    assert_eq!(rgmoe(&["--help"]).status.code(), Some(0));

    ok(&["gen", "--nodes", "60", "--dim", "4", "-o", p(&g)]);
    let out = rgmoe(&["eval", "-i", p(&g)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint.json"));

    assert_eq!(
        rgmoe(&["gen", "--homophily", "1.5", "-o", p(&g)]).status.code(),
        Some(1)
    );
    assert_eq!(
        rgmoe(&["train", "-i", p(&g), "--top-k", "99", "--epochs", "1"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        rgmoe(&[
            "attack",
            "-i",
            p(&g),
            "-o",
            p(&dir.path().join("a")),
            "--target-class",
            "9"
        ])
        .status
        .code(),
        Some(1)
    );
    assert_eq!(
        rgmoe(&["train", "-i", p(&dir.path().join("nowhere"))]).status.code(),
        Some(2)
    );

    fs::write(g.join("edges.txt"), "0 x\n").unwrap();
    assert_eq!(rgmoe(&["train", "-i", p(&g), "--epochs", "1"]).status.code(), Some(2));
}
