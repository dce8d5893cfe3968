use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gridrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridrl")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("cfg.json");
    fs::write(
        &path,
        r#"{"grid_h": 4, "grid_w": 4, "vocab": 16, "code_dim": 8, "categories": 4, "hidden": 12,
            "group_size": 4, "batch_size": 2, "total_steps": 4, "eval_every": 2, "eval_prompts": 4,
            "eval_samples": 2, "pretrain_steps": 3, "pretrain_batch": 4}"#,
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn argument_errors_exit_2() {
    assert_eq!(code(&gridrl(&["train", "--bogus"])), 2);
    assert_eq!(code(&gridrl(&["pretrain", "--preset", "nope"])), 2);
    assert_eq!(code(&gridrl(&["pretrain", "--learning_rate", "-1"])), 2);
    assert_eq!(code(&gridrl(&["pretrain", "--entropy_reward_mode", "sometimes"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"learning_rte": 1.0}"#).unwrap();
    assert_eq!(code(&gridrl(&["pretrain", "--config", bad.to_str().unwrap()])), 2);
}

#[test]
fn io_errors_exit_4() {
    let o = gridrl(&["eval", "--checkpoint", "/nonexistent/ref.stg"]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    let o = gridrl(&["compare", "/nonexistent/a.csv", "/nonexistent/b.csv"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_string_lossy().into_owned();
    let cfg = tiny_config(dir.path());

    let o = gridrl(&["pretrain", "--config", &cfg, "--out", &d("ref.stg")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("held-out counting reward"));

    for (run, mode) in [("run_top", "top"), ("run_off", "off")] {
        let o = gridrl(&[
            "train", "--config", &cfg, "--reference", &d("ref.stg"), "--out", &d(run),
            "--entropy_reward_mode", mode, "--learning_rate", "1e-3",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let metrics = fs::read_to_string(dir.path().join(run).join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 5);
        let saved = fs::read_to_string(dir.path().join(run).join("config.json")).unwrap();
        assert!(saved.contains(&format!("\"entropy_reward_mode\": \"{mode}\"")));
        assert!(saved.contains("\"learning_rate\": 0.001"));
    }

    let o = gridrl(&["eval", "--config", &cfg, "--checkpoint", &d("run_top/final.stg")]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("overall"));

    let o = gridrl(&[
        "sweep-temp", "--config", &cfg, "--checkpoint", &d("ref.stg"), "--temperatures", "0.5,1,1.5", "--out", &d("sweep.csv"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(dir.path().join("sweep.csv")).unwrap().lines().count(), 4);
    let o = gridrl(&["sweep-temp", "--config", &cfg, "--checkpoint", &d("ref.stg"), "--temperatures", "1,0.5"]);
    assert_eq!(code(&o), 2);

    let o = gridrl(&["compare", &d("run_top"), &d("run_off"), "--out-csv", &d("cmp.csv"), "--out-txt", &d("cmp.txt")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("cmp.csv")).unwrap();
    assert!(csv.starts_with("run,final_reward,entropy_drift,mean_kl,auc"));
    assert!(fs::read_to_string(dir.path().join("cmp.txt")).unwrap().contains("run_off"));

    let o = gridrl(&["render", "--config", &cfg, "--checkpoint", &d("ref.stg"), "--count", "2", "--out", &d("renders")]);
    assert_eq!(code(&o), 0);
    let ppm = fs::read(dir.path().join("renders/prompt_000.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n4 4\n255\n"));
    assert_eq!(ppm.len(), 11 + 4 * 4 * 3);

    // Architecture mismatch between config and checkpoint.
    let o = gridrl(&["eval", "--checkpoint", &d("ref.stg")]);
    assert_eq!(code(&o), 2);
}
