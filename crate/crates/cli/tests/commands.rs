use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sfharmony_core::statstore::{deserialize, deserialize_checkpoint};

fn sfh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfharmony")).args(args).env_remove("SFH_SEED").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = sfh(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Small sites, a trained source model and a K=2 bundle.
fn prepared(dir: &Path) {
    let data = dir.join("data");
    ok(&[
        "gen",
        "--sites",
        "3",
        "--n-train",
        "150",
        "--n-test",
        "40",
        "--n-classes",
        "3",
        "--seed",
        "4",
        "--out",
        p(&data),
    ]);
    ok(&[
        "train",
        "--data",
        p(&data.join("site1.sfds")),
        "--out",
        p(&dir.join("model.sfhw")),
        "--hidden",
        "8",
        "--feature-dim",
        "4",
        "--epochs",
        "3",
    ]);
    ok(&[
        "export",
        "--model",
        p(&dir.join("model.sfhw")),
        "--data",
        p(&data.join("site1.sfds")),
        "--k",
        "2",
        "--out",
        p(&dir.join("bundle.sfhb")),
    ]);
}

#[test]
fn gen_defaults_to_five_sites_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["gen", "--n-train", "40", "--n-test", "10", "--seed", "9", "--out", p(out)]);
    }
    let mut names: Vec<String> =
        fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    assert_eq!(names, ["site1.sfds", "site2.sfds", "site3.sfds", "site4.sfds", "site5.sfds"]);
    for name in &names {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let flag = dir.path().join("flag");
    let env = dir.path().join("env");
    ok(&["gen", "--sites", "1", "--n-train", "20", "--n-test", "5", "--seed", "21", "--out", p(&flag)]);
    let out = Command::new(env!("CARGO_BIN_EXE_sfharmony"))
        .args(["gen", "--sites", "1", "--n-train", "20", "--n-test", "5", "--out", p(&env)])
        .env("SFH_SEED", "21")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(flag.join("site1.sfds")).unwrap(), fs::read(env.join("site1.sfds")).unwrap());
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(sfh(&["gen", "--n-train", "10"]).status.code(), Some(2));
    assert_eq!(sfh(&["gen", "--sites", "9", "--out", "x"]).status.code(), Some(2));
    assert_eq!(sfh(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(sfh(&["adapt", "--data", "x.sfds", "--out", "y"]).status.code(), Some(2));
}

#[test]
fn missing_input_is_a_stage_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = sfh(&["train", "--data", p(&dir.path().join("absent.sfds")), "--out", p(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[train]"));
}

#[test]
fn zero_epoch_adaptation_returns_bundle_weights() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path());
    let adapted = dir.path().join("adapted.sfhw");
    ok(&[
        "adapt",
        "--bundle",
        p(&dir.path().join("bundle.sfhb")),
        "--data",
        p(&dir.path().join("data/site2.sfds")),
        "--epochs",
        "0",
        "--out",
        p(&adapted),
    ]);
    let bundle = deserialize(&fs::read(dir.path().join("bundle.sfhb")).unwrap()).unwrap();
    let (model, task) = deserialize_checkpoint(&fs::read(&adapted).unwrap()).unwrap();
    assert_eq!(model, bundle.weights);
    assert_eq!(task, bundle.meta.task);
}

#[test]
fn mismatched_k_fails_adaptation() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path());
    let out = sfh(&[
        "adapt",
        "--bundle",
        p(&dir.path().join("bundle.sfhb")),
        "--data",
        p(&dir.path().join("data/site2.sfds")),
        "--k",
        "3",
        "--epochs",
        "1",
        "--out",
        p(&dir.path().join("adapted.sfhw")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("[adapt]") && stderr.contains("component count mismatch"), "{stderr}");
    assert!(!dir.path().join("adapted.sfhw").exists());
}

#[test]
fn adapt_infer_eval_chain() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path());
    let d = dir.path();
    let site2 = d.join("data/site2.sfds");
    let registry = d.join("registry");
    let pushed = ok(&[
        "export",
        "--model",
        p(&d.join("model.sfhw")),
        "--data",
        p(&d.join("data/site1.sfds")),
        "--k",
        "2",
        "--out",
        p(&d.join("again.sfhb")),
        "--site-id",
        "site1",
        "--registry",
        p(&registry),
    ]);
    let version = String::from_utf8(pushed.stdout).unwrap().trim().to_string();
    assert_eq!(version.len(), 16);

    let adapt = |out: &Path| {
        ok(&[
            "adapt",
            "--registry",
            p(&registry),
            "--site-id",
            "site1",
            "--version",
            &version,
            "--data",
            p(&site2),
            "--epochs",
            "2",
            "--batch-size",
            "10",
            "--lr",
            "1e-3",
            "--seed",
            "2",
            "--out",
            p(out),
        ]);
    };
    adapt(&d.join("a1.sfhw"));
    adapt(&d.join("a2.sfhw"));
    assert_eq!(fs::read(d.join("a1.sfhw")).unwrap(), fs::read(d.join("a2.sfhw")).unwrap());

    let preds = d.join("preds.csv");
    ok(&[
        "infer",
        "--bundle",
        p(&d.join("bundle.sfhb")),
        "--model",
        p(&d.join("a1.sfhw")),
        "--data",
        p(&site2),
        "--out",
        p(&preds),
    ]);
    let text = fs::read_to_string(&preds).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("row,prediction,label"));
    assert_eq!(lines.count(), 40);

    let report = d.join("report");
    ok(&[
        "eval",
        "--bundle",
        p(&d.join("bundle.sfhb")),
        "--data",
        p(&site2),
        "--model",
        p(&d.join("a1.sfhw")),
        "--out",
        p(&report),
    ]);
    let table = fs::read_to_string(report.join("report.txt")).unwrap();
    assert!(table.starts_with("metric: accuracy"));
    assert!(table.lines().any(|l| l.starts_with("adapted")));
    assert!(report.join("report.csv").exists());
}

#[test]
fn run_executes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.toml");
    fs::write(
        &manifest,
        r#"
seed = 1
output_dir = "ignored"

[data]
n_classes = 3
n_train = 100
n_test = 30

[[sites]]
name = "src"
shift = { kind = "none" }

[[sites]]
name = "dark"
shift = { kind = "intensity_down", param = 0.5 }

[train]
hidden = [8]
feature_dim = 4
epochs = 2

[adapt]
epochs = 1
batch_size = 10
learning_rate = 1e-3
"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let run = ok(&["run", "--manifest", p(&manifest), "--out", p(&out)]);
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert!(stdout.contains("sfharmony_k2_b10") && stdout.contains("entropy_b10"));
    assert_eq!(fs::read_to_string(out.join("report.txt")).unwrap(), stdout);
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("method,site,metric,pre_dgmm,post_dgmm"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = 1\noutput_dir = \"x\"\nsites = []\n").unwrap();
    let failed = sfh(&["run", "--manifest", p(&bad)]);
    assert_eq!(failed.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&failed.stderr).contains("exactly one site"));
}
