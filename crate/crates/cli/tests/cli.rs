use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sable(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sable"))
        .args(args)
        .env("SABLE_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.ini");
    fs::write(&p, text).unwrap();
    p
}

fn only_subdir(dir: &Path) -> PathBuf {
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(entries.len(), 1, "{entries:?}");
    entries.pop().unwrap()
}

const UNIT_RUN: &str = "[env]\nname = unit\n[train]\nupdates = 4\nrollout_length = 8\nn_envs = 2\n\
                        eval_interval = 2\neval_episodes = 4\ntiming = false\n";

#[test]
fn missing_config_exits_2_with_path() {
    let o = sable(&["train", "--config", "/definitely/not/here.ini"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/definitely/not/here.ini"), "{}", stderr(&o));
}

#[test]
fn unknown_key_exits_2_with_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[train]\nupdates = 3\nlearning_rat = 0.1\n");
    let o = sable(&["train", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("run.ini:3:") && err.contains("learning_rat"), "{err}");
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn usage_error_exits_2() {
    assert_eq!(sable(&["train"]).status.code(), Some(2));
    assert_eq!(sable(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn identical_runs_write_identical_metrics_in_fresh_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), UNIT_RUN);
    let mut metrics = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let o = sable(&["train", "--config", cfg.to_str().unwrap(), "--seed", "3", "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let run = only_subdir(&out);
        assert!(run.join("checkpoints/final.ckpt").is_file());
        metrics.push(fs::read_to_string(run.join("metrics.csv")).unwrap());
    }
    assert_eq!(metrics[0], metrics[1]);
    let lines: Vec<&str> = metrics[0].lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("update,env_steps,mean_return"));
}

#[test]
fn reruns_never_reuse_an_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), UNIT_RUN);
    let out = tmp.path().join("runs");
    for _ in 0..2 {
        let o = sable(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    assert_eq!(fs::read_dir(&out).unwrap().count(), 2);
}

#[test]
fn resolved_config_lists_every_default() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[env]\nname = unit\n[train]\nupdates = 1\nrollout_length = 4\neval_episodes = 1\n");
    let out = tmp.path().join("runs");
    let o = sable(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(only_subdir(&out).join("config.resolved.ini")).unwrap();
    for line in [
        "gamma = 0.99",
        "gae_lambda = 0.9",
        "rollout_length = 4",
        "normalize_advantage = true",
        "value_coef = 0.5",
        "n_heads = 1",
        "terminate_on_success = false",
    ] {
        assert!(text.lines().any(|l| l == line), "missing `{line}` in\n{text}");
    }
}

#[test]
fn eval_reports_both_modes_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), UNIT_RUN);
    let out = tmp.path().join("runs");
    let o = sable(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ckpt = only_subdir(&out).join("checkpoints/final.ckpt");
    let args = ["eval", "--config", cfg.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()];
    let first = sable(&args);
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    let text = stdout(&first);
    assert!(text.contains("greedy:") && text.contains("stochastic:"), "{text}");
    assert!(text.contains("over 32 episodes"), "{text}");
    assert_eq!(stdout(&sable(&args)), text);

    let other = write_config(tmp.path(), "[env]\nname = neom:simple-sine:3\n");
    let o = sable(&["eval", "--config", other.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("obs_embed.w"), "{}", stderr(&o));
}

#[test]
fn verify_lists_suites() {
    let o = sable(&["verify", "--list"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).lines().any(|l| l == "appendix-d33-matrices"));
}

#[test]
fn verify_decay_suite_passes_and_fails_under_fault() {
    let ok = sable(&["verify", "--suite", "appendix-d33-matrices", "--suite", "appendix-d34-chunking"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    assert_eq!(stdout(&ok).lines().filter(|l| l.starts_with("PASS")).count(), 2);

    let bad = sable(&["verify", "--suite", "appendix-d33-matrices", "--inject-fault", "kappa-sign-flip"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("FAIL appendix-d33-matrices"), "{}", stdout(&bad));
    assert!(stderr(&bad).contains("appendix-d33-matrices"));

    assert_eq!(sable(&["verify", "--suite", "nonsense"]).status.code(), Some(2));
    assert_eq!(sable(&["verify", "--inject-fault", "nonsense"]).status.code(), Some(2));
}

#[test]
fn bench_agents_writes_one_row_per_count_and_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[model]\nd_model = 8\n[bench]\nagents = 8, 16, 32\nsteps = 2\n");
    let out = tmp.path().join("bench");
    let o = sable(&["bench", "--sweep", "agents", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(only_subdir(&out).join("agents.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "model,agents_or_chunk,steps_per_sec,peak_bytes");
    assert_eq!(lines.len(), 1 + 3 * 3);
    for count in ["8", "16", "32"] {
        let rows = lines[1..].iter().filter(|l| l.split(',').nth(1) == Some(count)).count();
        assert_eq!(rows, 3, "{csv}");
    }
}

#[test]
fn bench_rejects_unknown_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let o = sable(&["bench", "--sweep", "planets", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
