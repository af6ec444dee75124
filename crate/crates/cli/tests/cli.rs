use std::path::Path;
use std::process::{Command, Output};

fn fairtrain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairtrain"))
        .args(args)
        .env("RUST_BACKTRACE", "0")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.yaml");
    let text = format!(
        "dataset:\n  name: biased_mnist\n  root: {}\n  train_size: 120\n  test_size: 60\n  bias_levels: [0.9]\n\
         train:\n  epochs: 1\n  batch_size: 32\n\
         output_dir: {}\n",
        dir.join("data").display(),
        dir.join("out").display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn list_prints_registered_methods() {
    let out = fairtrain(&["list", "methods"]);
    assert!(out.status.success());
    let names: Vec<String> = stdout(&out).lines().map(String::from).collect();
    assert_eq!(names.len(), 13);
    assert!(names.iter().any(|n| n == "mavias"));
}

#[test]
fn unknown_category_fails_with_the_choices() {
    let out = fairtrain(&["list", "widgets"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("widgets") && err.contains("methods"), "{err}");
}

#[test]
fn run_then_eval_a_tiny_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = fairtrain(&["run", "--cfg", cfg, "--opts", "method.name=sd", "seed=3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run_dir = dir.path().join("out/biased_mnist/sd/seed3");
    assert!(stdout(&out).contains("run directory"));
    assert!(run_dir.join("metrics.csv").is_file());

    let ckpt = run_dir.join("ckpt_best");
    let out = fairtrain(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--cfg", cfg, "--opts", "method.name=sd", "seed=3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.lines().any(|l| l.starts_with("test: ") && l.contains("acc")), "{text}");
}

#[test]
fn eval_with_a_changed_config_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    assert!(fairtrain(&["run", "--cfg", cfg]).status.success());
    let ckpt = dir.path().join("out/biased_mnist/erm/seed0/ckpt_latest");
    let ckpt = ckpt.to_str().unwrap();
    let out = fairtrain(&["eval", "--ckpt", ckpt, "--cfg", cfg, "--opts", "train.lr=0.5"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    assert!(fairtrain(&["eval", "--ckpt", ckpt, "--cfg", cfg, "--opts", "train.lr=0.5", "--force"]).status.success());
}
