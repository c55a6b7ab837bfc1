use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_fieldformer");

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, divergence_bound: f64) {
    let toml = format!(
        r#"
[model]
layers = 1
hidden = 16
heads = 2
intermediate = 32
modes = [4, 4, 4]
divergence_bound = {divergence_bound:e}

[train]
total_steps = 4
batch_sizes = [2, 1, 1]
holdout_fraction = 0.25

[data]
families = ["advection1d", "diffusion1d"]
count = 4
grid = 16
steps = 8

[eval]
manifest = "data/manifest.txt"
checkpoint = "run/checkpoint_final.ckpt"
context = 4
horizon = 3
grid_sizes = [16, 32]
context_lengths = [2, 4]
count = 2
"#
    );
    std::fs::write(dir.join("exp.toml"), toml).unwrap();
}

fn gen_and_pretrain(dir: &Path) {
    let o = run(&["gen", "--config", "exp.toml", "--out", "data"], dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["pretrain", "--config", "exp.toml", "--out", "run", "--deterministic"], dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unknown_subcommand_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(run(&["eval", "--no-such-flag"], dir.path()).status.code(), Some(1));
    assert_eq!(run(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["eval", "--checkpoint", "missing.ckpt", "--manifest", "missing.txt"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(dir.path().join("bad.toml"), "[model]\nhidden = 15\n").unwrap();
    assert_eq!(run(&["gen", "--config", "bad.toml"], dir.path()).status.code(), Some(2));
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["selftest", "--out", "st"], dir.path());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{stdout}");
    assert!(stdout.lines().all(|l| l.starts_with("PASS")), "{stdout}");
    assert!(dir.path().join("st/selftest.csv").exists());
}

#[test]
fn gen_writes_readable_archives() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), 1e6);
    let o = run(&["gen", "--config", "exp.toml", "--out", "data"], dir.path());
    assert!(o.status.success());
    let data = fieldformer::trainer::load_manifest(dir.path().join("data/manifest.txt")).unwrap();
    assert_eq!(data.len(), 8);
    let t = fieldformer::archive::read_archive(dir.path().join("data/diffusion1d_00004.pdearch")).unwrap();
    assert_eq!(t.field.steps(), 8);
    assert_eq!(t.caption, data[4].caption);
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), 1e6);
    gen_and_pretrain(dir.path());
    let curve = std::fs::read(dir.path().join("run/loss_curve.csv")).unwrap();
    let ckpt = std::fs::read(dir.path().join("run/checkpoint_final.ckpt")).unwrap();
    let o = run(&["pretrain", "--config", "exp.toml", "--out", "run", "--deterministic"], dir.path());
    assert!(o.status.success());
    assert_eq!(curve, std::fs::read(dir.path().join("run/loss_curve.csv")).unwrap());
    assert_eq!(ckpt, std::fs::read(dir.path().join("run/checkpoint_final.ckpt")).unwrap());

    let eval = |out: &str| {
        let o = run(&["eval", "--config", "exp.toml", "--out", out, "--deterministic"], dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(dir.path().join(out).join("metrics.csv")).unwrap()
    };
    let a = eval("e1");
    assert_eq!(a, eval("e2"));
    assert!(String::from_utf8(a).unwrap().lines().count() > 1);

    for (cmd, file) in [("scale-sweep", "scale_sweep.csv"), ("context-sweep", "context_sweep.csv")] {
        let o = run(&[cmd, "--config", "exp.toml", "--out", "sw"], dir.path());
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(dir.path().join("sw").join(file).exists());
    }
    let o = run(&["rollout", "--config", "exp.toml", "--out", "ro"], dir.path());
    assert!(o.status.success());
    assert!(dir.path().join("ro/rollout.csv").exists());
}

#[test]
fn divergent_rollout_writes_report_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), 1e-9);
    gen_and_pretrain(dir.path());
    let o = run(&["rollout", "--config", "exp.toml", "--out", "ro"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("ro/divergence_report.json")).unwrap()).unwrap();
    assert_eq!(report["step"], 1);
    assert_eq!(report["context"], 4);
}
