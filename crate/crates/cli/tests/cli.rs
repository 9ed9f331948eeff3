use std::path::Path;
use std::process::{Command, Output};

fn cct(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cct"))
        .current_dir(dir)
        .env_remove("CCT_SEED")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn setup(dir: &Path) {
    let out = cct(dir, &["gen-corpus", "--seed", "1", "--train", "18", "--held-out", "9"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::write(
        dir.join("run.cfg"),
        "seed = 4\nd_model = 16\nn_layers = 1\nn_heads = 2\nepochs = 1\nbatch_size = 6\nn_samples = 2\nmax_new_tokens = 32\n",
    )
    .unwrap();
}

#[test]
fn full_pipeline_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    for cmd in ["mutate", "build-dataset", "train", "evaluate"] {
        let out = cct(dir.path(), &[cmd, "run.cfg"]);
        assert_eq!(out.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(dir.path().join("run/results/summary.json").exists());
    assert_eq!(std::fs::read_to_string(dir.path().join("run/results/loss.csv")).unwrap().lines().next(), Some("step,lm,token,seq,total"));
}

#[test]
fn overrides_and_env_seed() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let out = Command::new(env!("CARGO_BIN_EXE_cct"))
        .current_dir(dir.path())
        .env("CCT_SEED", "99")
        .args(["show-config", "run.cfg", "--epochs", "3", "--learning-rate=0.01"])
        .output()
        .unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("seed = 99\n"), "{text}");
    assert!(text.contains("epochs = 3\n"));
    assert!(text.contains("learning_rate = 0.01\n"));
    let over = cct(dir.path(), &["show-config", "run.cfg", "--seed", "5"]);
    assert!(String::from_utf8(over.stdout).unwrap().contains("seed = 5\n"));
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    assert_eq!(cct(dir.path(), &["train", "run.cfg", "--no_such_key", "1"]).status.code(), Some(1));
    assert_eq!(cct(dir.path(), &["train", "missing.cfg"]).status.code(), Some(1));
    assert_eq!(cct(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(cct(dir.path(), &["train", "run.cfg", "--epochs"]).status.code(), Some(1));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    std::fs::write(dir.path().join("data/train.jsonl"), "{\"instruction\": 1}\n").unwrap();
    let out = cct(dir.path(), &["mutate", "run.cfg"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
