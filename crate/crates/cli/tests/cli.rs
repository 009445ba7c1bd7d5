use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn workspace() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpc-snn"))
        .args(args)
        .current_dir(workspace())
        .env("RUST_BACKTRACE", "0")
        .output()
        .expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn quick_config(dir: &Path) -> PathBuf {
    let path = dir.join("quick.cfg");
    fs::write(&path, "# two short epochs\nseeds = 7\ncpc.hidden = 16\ncpc.batches_per_epoch = 2\ncpc.val_batches = 2\ncpc.max_epochs = 2\n").unwrap();
    path
}

#[test]
fn fetch_data_verifies_bundled_files() {
    let out = run(&["fetch-data"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert_eq!(text(&out.stdout).lines().filter(|l| l.starts_with("ok")).count(), 2);
}

#[test]
fn gradcheck_passes_and_detects_injected_bug() {
    let ok = run(&["gradcheck"]);
    assert!(ok.status.success(), "{}", text(&ok.stdout));
    let bad = run(&["gradcheck", "--inject", "dense"]);
    assert!(!bad.status.success());
    assert!(text(&bad.stdout).contains("FAIL"));
}

#[test]
fn unknown_config_key_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "cpc.hiden = 3\n").unwrap();
    let out = run(&["train-cpc", "--config", cfg.to_str().unwrap(), "--encoding", "random"]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("cpc.hiden"), "{}", text(&out.stderr));
}

#[test]
fn missing_encoder_names_the_producing_command() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train-cpc", "--encoding", "autoencoder", "--seed", "1", "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("train-autoencoder"), "{}", text(&out.stderr));
}

#[test]
fn random_baseline_run_writes_reproducible_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let go = |out: &str| {
        let o = run(&["train-cpc", "--config", cfg.to_str().unwrap(), "--encoding", "random", "--quiet", "--out", dir.path().join(out).to_str().unwrap()]);
        assert!(o.status.success(), "{}", text(&o.stderr));
        dir.path().join(out).join("2500-random")
    };
    let (a, b) = (go("a"), go("b"));
    for f in ["seed-7/metrics.csv", "summary.json", "curves.svg"] {
        assert!(a.join(f).exists(), "{f} missing");
    }
    assert_eq!(fs::read(a.join("seed-7/metrics.csv")).unwrap(), fs::read(b.join("seed-7/metrics.csv")).unwrap());
    let csv = fs::read_to_string(a.join("seed-7/metrics.csv")).unwrap();
    assert!(csv.starts_with("epoch,split,loss,accuracy,learning_rate"));
    let summary: String = fs::read_to_string(a.join("summary.json")).unwrap();
    assert!(summary.contains("\"encoding\""));
}
