use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn trico(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trico"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

const SMALL: &[&str] = &[
    "--data.n",
    "400",
    "--data.classes",
    "3",
    "--data.d1",
    "6",
    "--data.d2",
    "5",
    "--model.hidden",
    "8",
    "--train.epochs",
    "2",
    "--generator.epsilon",
    "0.1",
];

fn small(extra: &[&'static str]) -> Vec<&'static str> {
    let mut v = SMALL.to_vec();
    v.extend_from_slice(extra);
    v
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

/// Report with the config echo's `data.*` and `output.dir` entries removed.
fn without_paths(mut v: Value) -> Value {
    let cfg = v["config"].as_object_mut().unwrap();
    cfg.retain(|k, _| !k.starts_with("data.") && k != "output.dir");
    v
}

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let tmp = tempfile::tempdir().unwrap();
    let o = trico(&["frobnicate"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn gradcheck_exits_0() {
    let tmp = tempfile::tempdir().unwrap();
    let o = trico(&["gradcheck"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn config_errors_exit_2_and_cite_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.conf"), "# ok\ntrain.epochs = 2\ntrain.epochs two\n").unwrap();
    let o = trico(&["train", "--config", "bad.conf"], tmp.path());
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.conf:3"), "{err}");

    fs::write(tmp.path().join("sum.conf"), "teacher.lambda_u = 0.8\nteacher.lambda_adv = 0.4\n").unwrap();
    let o = trico(&["train", "--config", "sum.conf"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("sum.conf:2"));

    let o = trico(&["train", "--teacher.color", "red"], tmp.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn flags_override_the_file_and_the_echo_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("a.conf"), "teacher.eta_t = 0.5\ntrain.seeds = 3\n").unwrap();
    let args = small(&["--config", "a.conf", "--teacher.eta_t", "0", "--out", "a"]);
    let o = trico(&[&["train"], &args[..]].concat(), tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let first = report(&tmp.path().join("a"));
    assert_eq!(first["config"]["teacher.eta_t"], "0");
    assert_eq!(first["config"]["train.seeds"], "3");

    let o = trico(&["train", "--config", "a/resolved.conf", "--out", "b"], tmp.path());
    assert_eq!(code(&o), 0);
    let second = report(&tmp.path().join("b"));
    assert_eq!(without_paths(first), without_paths(second));
    assert_eq!(
        fs::read(tmp.path().join("a/model.trcm")).unwrap(),
        fs::read(tmp.path().join("b/model.trcm")).unwrap()
    );
}

#[test]
fn synth_data_then_train_matches_the_in_memory_run() {
    let tmp = tempfile::tempdir().unwrap();
    let noisy = small(&["--data.label_noise", "0.2", "--data.seed", "5"]);
    let o = trico(&[&["train"], &noisy[..], &["--out", "mem"]].concat(), tmp.path());
    assert_eq!(code(&o), 0);
    let o = trico(&[&["synth-data"], &noisy[..], &["--out", "files"]].concat(), tmp.path());
    assert_eq!(code(&o), 0);
    let o = trico(
        &[&["train", "--config", "files/data.conf"], &noisy[..], &["--out", "disk"]].concat(),
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    assert_eq!(without_paths(report(&tmp.path().join("mem"))), without_paths(report(&tmp.path().join("disk"))));
    for f in ["model.trcm", "curves.csv", "strategy_trace.csv"] {
        assert_eq!(
            fs::read(tmp.path().join("mem").join(f)).unwrap(),
            fs::read(tmp.path().join("disk").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn seed_lists_eval_cost_and_equilibrium() {
    let tmp = tempfile::tempdir().unwrap();
    let o = trico(&[&["train"], &small(&["--train.seeds", "0,1", "--out", "run"])[..]].concat(), tmp.path());
    assert_eq!(code(&o), 0);
    let r = report(&tmp.path().join("run"));
    assert_eq!(r["seeds"].as_array().unwrap().len(), 2);
    for s in ["seed-0", "seed-1"] {
        assert!(tmp.path().join("run").join(s).join("model.trcm").exists());
    }

    let o = trico(
        &[&["eval", "--model", "run/seed-1/model.trcm"], &small(&["--out", "ev"])[..]].concat(),
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ev: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("ev/eval.json")).unwrap()).unwrap();
    let acc = ev["metrics"]["accuracy"].as_f64().unwrap();
    assert_eq!(acc, r["seeds"][1]["final_eval"]["accuracy"].as_f64().unwrap());

    let o = trico(&["eval", "--model", "run/seed-1/model.trcm", "--data.d1", "7"], tmp.path());
    assert_eq!(code(&o), 2);

    let o = trico(&[&["cost"], &small(&["--out", "c"])[..]].concat(), tmp.path());
    assert_eq!(code(&o), 0);
    let c: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("c/cost.json")).unwrap()).unwrap();
    assert!(c["cost"]["ratio"].as_f64().unwrap() > 1.0);

    let o = trico(
        &["equilibrium", "--run", "run", "--equilibrium.epochs", "1", "--equilibrium.probe_size", "16"],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let eq: Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("run/equilibrium_report.json")).unwrap()).unwrap();
    for key in ["nash", "stackelberg", "payoff_log", "grid", "best_response"] {
        assert!(!eq[key].is_null(), "{key}");
    }
}

#[test]
fn missing_data_file_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let o = trico(
        &["train", "--data.source", "files", "--data.view1", "a", "--data.view2", "b", "--data.labels", "c"],
        tmp.path(),
    );
    assert_eq!(code(&o), 1);
}
