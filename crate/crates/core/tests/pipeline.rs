mod common;

use cct_core::pipeline::*;
use cct_core::CctError;
use common::*;
use std::fs;
use std::sync::atomic::AtomicBool;

fn no_stop() -> AtomicBool {
    AtomicBool::new(false)
}

#[test]
fn mutate_counts_and_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load(&tiny_run(dir.path(), ""), &[]);
    let s = cmd_mutate(&cfg).unwrap();
    assert_eq!(s.mutated, 45);
    assert_eq!(s.skipped_no_code + s.skipped_no_candidates, 0);
    let first = fs::read(cfg.mutants_path()).unwrap();
    cmd_mutate(&cfg).unwrap();
    assert_eq!(fs::read(cfg.mutants_path()).unwrap(), first);
}

#[test]
fn mutate_empty_and_prose_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_run(dir.path(), "");
    fs::write(dir.path().join("data/train.jsonl"), "").unwrap();
    let cfg = load(&cfg_path, &[]);
    assert_eq!(cmd_mutate(&cfg).unwrap(), MutateSummary::default());
    assert_eq!(fs::read_to_string(cfg.mutants_path()).unwrap(), "");

    fs::write(
        dir.path().join("data/train.jsonl"),
        "{\"instruction\":\"Say hi.\",\"input\":null,\"output\":\"Hello there.\"}\n\
         {\"instruction\":\"Set x.\",\"input\":null,\"output\":\"x = 1\\n\"}\n",
    )
    .unwrap();
    let s = cmd_mutate(&cfg).unwrap();
    assert_eq!((s.mutated, s.skipped_no_code, s.skipped_no_candidates), (0, 1, 1));
}

#[test]
fn malformed_input_is_a_data_error_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_run(dir.path(), "");
    fs::write(
        dir.path().join("data/train.jsonl"),
        "{\"instruction\":\"a\",\"input\":null,\"output\":\"b\"}\nnot json\n",
    )
    .unwrap();
    let err = cmd_mutate(&load(&cfg_path, &[])).unwrap_err();
    assert_eq!(exit_code(&err), 2);
    assert!(err.to_string().contains(":2:"), "{err}");
}

#[test]
fn missing_input_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load(&tiny_run(dir.path(), ""), &[("train_data", "/nonexistent/x.jsonl")]);
    assert_eq!(exit_code(&cmd_mutate(&cfg).unwrap_err()), 1);
}

#[test]
fn tampered_mutant_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load(&tiny_run(dir.path(), ""), &[]);
    cmd_mutate(&cfg).unwrap();
    let text = fs::read_to_string(cfg.mutants_path()).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut v: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    v["mutant"]["buggy"] = "def broken(): pass\n".into();
    lines[0] = v.to_string();
    fs::write(cfg.mutants_path(), lines.join("\n") + "\n").unwrap();
    let err = cmd_build_dataset(&cfg).unwrap_err();
    assert_eq!(exit_code(&err), 2, "{err}");
}

#[test]
fn build_dataset_matches_inline_mutation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load(&tiny_run(dir.path(), ""), &[]);
    let s = cmd_build_dataset(&cfg).unwrap();
    let inline = fs::read(cfg.dataset_path()).unwrap();
    cmd_mutate(&cfg).unwrap();
    assert_eq!(cmd_build_dataset(&cfg).unwrap(), s);
    assert_eq!(fs::read(cfg.dataset_path()).unwrap(), inline);
    assert_eq!(s.records, 45);
    assert_eq!(s.with_comparison, 45);
}

fn loss_rows(cfg: &RunConfig) -> Vec<Vec<f64>> {
    fs::read_to_string(cfg.loss_log())
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect()
}

#[test]
fn loss_log_columns_follow_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_run(dir.path(), "epochs = 1\n");
    let cfg = load(&cfg_path, &[]);
    cmd_build_dataset(&cfg).unwrap();
    cmd_train(&cfg, &no_stop()).unwrap();
    let header = fs::read_to_string(cfg.loss_log()).unwrap();
    assert!(header.starts_with("step,lm,token,seq,total\n"));
    let full = loss_rows(&cfg);
    assert_eq!(full.len(), 6);
    assert!(full[0][1] > 0.0 && full[0][2] > 0.0 && full[0][3] > 0.0);

    let cfg = load(&cfg_path, &[("ablation", "instruct_only")]);
    cmd_train(&cfg, &no_stop()).unwrap();
    for row in loss_rows(&cfg) {
        assert_eq!((row[2], row[3]), (0.0, 0.0));
        assert_eq!(row[1], row[4]);
    }
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_run(dir.path(), "");
    let straight = load(&cfg_path, &[("results_dir", dir.path().join("a").to_str().unwrap()), ("checkpoint_dir", dir.path().join("a").to_str().unwrap())]);
    cmd_build_dataset(&straight).unwrap();
    let s = cmd_train(&straight, &no_stop()).unwrap();
    assert!(s.completed);

    let out = dir.path().join("b");
    let out = out.to_str().unwrap();
    let part = load(&cfg_path, &[("results_dir", out), ("checkpoint_dir", out), ("stop_after", "4")]);
    let p = cmd_train(&part, &no_stop()).unwrap();
    assert_eq!(p.steps, 4);
    assert!(!p.completed);
    assert!(part.latest_checkpoint().is_file());
    let rest = load(&cfg_path, &[("results_dir", out), ("checkpoint_dir", out), ("resume", "true")]);
    assert!(cmd_train(&rest, &no_stop()).unwrap().completed);

    assert_eq!(fs::read(straight.final_checkpoint()).unwrap(), fs::read(rest.final_checkpoint()).unwrap());
    assert_eq!(fs::read(straight.loss_log()).unwrap(), fs::read(rest.loss_log()).unwrap());
}

#[test]
fn interrupt_writes_resumable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_run(dir.path(), "");
    let cfg = load(&cfg_path, &[]);
    cmd_build_dataset(&cfg).unwrap();
    let err = cmd_train(&cfg, &AtomicBool::new(true)).unwrap_err();
    assert!(matches!(err, CctError::Interrupted { step: 1 }), "{err}");
    assert_eq!(exit_code(&err), 3);
    assert!(cfg.latest_checkpoint().is_file());
    assert_eq!(loss_rows(&cfg).len(), 1);
    let resumed = load(&cfg_path, &[("resume", "true")]);
    assert!(cmd_train(&resumed, &no_stop()).unwrap().completed);
    assert_eq!(loss_rows(&resumed).len(), 12);
}

#[test]
fn resume_with_changed_settings_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_run(dir.path(), "");
    let cfg = load(&cfg_path, &[("stop_after", "1")]);
    cmd_build_dataset(&cfg).unwrap();
    cmd_train(&cfg, &no_stop()).unwrap();
    let changed = load(&cfg_path, &[("resume", "true"), ("learning_rate", "0.01")]);
    assert_eq!(exit_code(&cmd_train(&changed, &no_stop()).unwrap_err()), 1);
}

#[test]
fn evaluate_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_run(dir.path(), "epochs = 1\n");
    let cfg = load(&cfg_path, &[]);
    cmd_build_dataset(&cfg).unwrap();
    cmd_train(&cfg, &no_stop()).unwrap();
    let err = cmd_evaluate(&load(&cfg_path, &[("d_model", "24"), ("n_heads", "2")]), None).unwrap_err();
    assert_eq!(exit_code(&err), 1);
    assert!(err.to_string().contains("d_model"), "{err}");

    // A rebuilt vocabulary from different data no longer matches.
    fs::write(&cfg.train_data, "{\"instruction\":\"Only prose.\",\"input\":null,\"output\":\"Nothing here.\"}\n").unwrap();
    cmd_build_dataset(&cfg).unwrap();
    let err = cmd_evaluate(&cfg, None).unwrap_err();
    assert!(err.to_string().contains("vocabulary"), "{err}");
}

#[test]
fn evaluate_writes_results_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = load(&tiny_run(dir.path(), "epochs = 1\nks = 1,2\n"), &[]);
    cmd_build_dataset(&cfg).unwrap();
    cmd_train(&cfg, &no_stop()).unwrap();
    let s = cmd_evaluate(&cfg, None).unwrap();
    assert!(s.tasks >= 8, "{s:?}");
    let p1 = s.pass_at(1).unwrap();
    assert!((0.0..=1.0).contains(&p1));
    assert!(s.pass_at(2).unwrap() >= p1);
    let results = fs::read_to_string(cfg.results_dir.join("results.jsonl")).unwrap();
    assert_eq!(results.lines().count(), s.tasks);
    assert!(results.lines().all(|l| l.contains("\"pass_at_1\"") && l.contains("\"pass_at_2\"")));
    let tasks = fs::read_to_string(cfg.results_dir.join("tasks.jsonl")).unwrap();
    for key in ["task_id", "prompt", "reference", "tests", "entry_point", "timeout_s"] {
        assert!(tasks.lines().all(|l| l.contains(&format!("\"{key}\""))));
    }
}

#[test]
fn external_task_file_is_used_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_run(dir.path(), "epochs = 1\n");
    let cfg = load(&cfg_path, &[]);
    cmd_build_dataset(&cfg).unwrap();
    cmd_train(&cfg, &no_stop()).unwrap();
    let task = r#"{"task_id":"ext/1","prompt":"Fix it.","reference":"def f():\n    return 1\n","tests":"assert f() == 1\n","entry_point":"f","timeout_s":5.0}"#;
    let tasks = dir.path().join("tasks.jsonl");
    fs::write(&tasks, format!("{task}\n")).unwrap();
    let cfg = load(&cfg_path, &[("tasks_file", tasks.to_str().unwrap())]);
    let s = cmd_evaluate(&cfg, None).unwrap();
    assert_eq!((s.tasks, s.discarded), (1, 0));
}
