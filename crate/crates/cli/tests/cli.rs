use std::path::Path;
use std::process::{Command, Output};

fn gtool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gtool"))
        .arg("--no-timestamps")
        .args(args)
        .output()
        .expect("spawn gtool")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth(dir: &Path) -> String {
    let ds = dir.join("ds.json").to_str().unwrap().to_string();
    let out = gtool(&["synth", "--out", &ds, "--requests", "40", "--seed", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    ds
}

#[test]
fn synth_then_build_graph_writes_edges() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = synth(tmp.path());
    let out_dir = tmp.path().join("g");
    let out = gtool(&["build-graph", "--dataset", &ds, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let edges = std::fs::read_to_string(out_dir.join("edges.tsv")).unwrap();
    assert!(edges.lines().count() > 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("tools=20"));
}

#[test]
fn missing_dataset_file_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    let out = gtool(&["build-graph", "--dataset", missing.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn unknown_tool_in_trajectory_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("bad.json");
    std::fs::write(
        &ds,
        r#"{"tools":[{"name":"a","description":"x"}],"requests":[{"id":"r","text":"t","trajectory":["b"]}]}"#,
    )
    .unwrap();
    let out = gtool(&["build-graph", "--dataset", ds.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn eval_without_checkpoint_names_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = synth(tmp.path());
    let out = gtool(&["eval", "--dataset", &ds, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--checkpoint"), "{}", stderr(&out));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = gtool(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--bogus"));
}

#[test]
fn help_lists_subcommands_and_flags() {
    let out = gtool(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["build-graph", "train", "plan", "eval", "ablate", "sweep", "synth"] {
        assert!(text.contains(cmd), "missing {cmd}");
    }
    let out = gtool(&["sweep", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--ratios", "--dataset", "--config", "--seed", "--lambda"] {
        assert!(text.contains(flag), "missing {flag}");
    }
}

#[test]
fn sweep_writes_one_report_per_ratio() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = synth(tmp.path());
    let out_dir = tmp.path().join("s");
    let out = gtool(&[
        "sweep",
        "--dataset",
        &ds,
        "--out",
        out_dir.to_str().unwrap(),
        "--epochs",
        "1",
        "--ratios",
        "0,0.3,0.6,0.9",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = std::fs::read_to_string(out_dir.join("sweep.tsv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    for r in ["0", "0.3", "0.6", "0.9"] {
        assert!(out_dir.join(format!("sweep_{r}.json")).exists());
    }
}

#[test]
fn bad_sweep_ratio_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = synth(tmp.path());
    let out = gtool(&["sweep", "--dataset", &ds, "--out", tmp.path().to_str().unwrap(), "--epochs", "1", "--ratios", "1.5"]);
    assert!(!out.status.success());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = synth(tmp.path());
    let out_dir = tmp.path().join("t");
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, format!("out_dir = {:?}\n[train]\nepochs = 50\n", out_dir.to_str().unwrap())).unwrap();
    let out = gtool(&["train", "--config", cfg.to_str().unwrap(), "--dataset", &ds, "--epochs", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("train_report.json")).unwrap()).unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);
    assert_eq!(report["wall_time_secs"], 0.0);
}

#[test]
fn train_then_plan_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = synth(tmp.path());
    let out_dir = tmp.path().join("o");
    let o = out_dir.to_str().unwrap();
    assert!(gtool(&["train", "--dataset", &ds, "--out", o, "--epochs", "2"]).status.success());
    let ckpt = out_dir.join("checkpoint.json");
    let ckpt = ckpt.to_str().unwrap();
    let out = gtool(&["plan", "--dataset", &ds, "--out", o, "--checkpoint", ckpt, "--request", "run something"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = gtool(&["eval", "--dataset", &ds, "--out", o, "--checkpoint", ckpt, "--split", "val"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let tsv = std::fs::read_to_string(out_dir.join("eval_val.tsv")).unwrap();
    assert!(tsv.starts_with("id\tn_f1\tl_f1\tned"));
    let out = gtool(&["eval", "--dataset", &ds, "--out", o, "--checkpoint", ckpt, "--embed-dim", "32"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = synth(tmp.path());
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        let out = gtool(&["train", "--dataset", &ds, "--out", dir.to_str().unwrap(), "--epochs", "3", "--seed", "9"]);
        assert!(out.status.success(), "{}", stderr(&out));
        (
            std::fs::read(dir.join("checkpoint.json")).unwrap(),
            std::fs::read_to_string(dir.join("train_report.json")).unwrap(),
        )
    };
    let (c1, r1) = run("a");
    let (c2, r2) = run("b");
    assert_eq!(c1, c2);
    // Reports differ only in the checkpoint path they record.
    assert_eq!(r1.replace("/a/", "/b/"), r2);
}
