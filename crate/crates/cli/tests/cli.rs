use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
[model]
depth = 3
width = 1
base_width = 2
[noise]
noise_type = ncmn1
sigma = 0.3
[schedule]
epochs = 1
batch_size = 16
[data]
dataset = synthetic_textures
train_size = 32
test_size = 16
[run]
seeds = 1
output_dir = out
";

fn ncmn(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ncmn"))
        .args(args)
        .env("NCMN_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn run_writes_under_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.cfg", SMALL);
    let out = ncmn(&["run", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("out");
    for f in ["summary.json", "epochs.csv", "seed-1/epochs.csv", "seed-1/model.ckpt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert!(summary.get("metadata").is_some());

    let ckpt = run.join("seed-1/model.ckpt");
    let out = ncmn(&["diagnose", &cfg, "--model", ckpt.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["correlation"]["groups"].is_array());
}

#[test]
fn sweep_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.cfg", SMALL);
    let out = ncmn(&["sweep", &cfg, "--sigma-grid", "0,0.2"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("out/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.cfg", "[noise]\nsigma = -0.5\n");
    let out = ncmn(&["run", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.cfg:2"), "{err}");

    let missing = dir.path().join("nope.cfg");
    assert_eq!(ncmn(&["run", missing.to_str().unwrap()], dir.path()).status.code(), Some(1));
    assert_eq!(ncmn(&["frobnicate"], dir.path()).status.code(), Some(1));
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("truncated.bin");
    std::fs::write(&bin, vec![0u8; 100]).unwrap();
    let text = format!(
        "[data]\ndataset = cifar10_binary\ntrain_files = {0}\ntest_files = {0}\n[run]\nseeds = 1\n",
        bin.display()
    );
    let cfg = write(dir.path(), "cifar.cfg", &text);
    let out = ncmn(&["run", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("[schedule]", "[optimizer]\nalpha0 = 1e200\n[schedule]");
    let cfg = write(dir.path(), "hot.cfg", &text);
    let out = ncmn(&["run", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ncmn(&["gradcheck", "--instances", "1"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().count() >= 22 && !text.contains("FAIL"), "{text}");
}
