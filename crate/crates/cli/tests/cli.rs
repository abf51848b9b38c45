//! Drives the `latent-grpo` binary end to end on tiny configurations.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use latent_grpo::config::RunConfig;

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.d_model = 8;
    cfg.warmup.corpus_size = 32;
    cfg.warmup.stage1_epochs = 1;
    cfg.warmup.stage2_epochs = 1;
    cfg.warmup.gate_prompts = 8;
    cfg.rl.group_size = 4;
    cfg.rl.batch_size = 2;
    cfg.rl.t_lat_max = 4;
    cfg.rl.l_max = 10;
    cfg.rl.total_steps = 6;
    cfg.rl.eval_interval = 3;
    cfg.rl.checkpoint_interval = 2;
    cfg.eval.prompts = 8;
    cfg.run.output_dir = "run".into();
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml_string()).unwrap();
    path
}

fn cli(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latent-grpo"))
        .args(args)
        .env("LATENT_GRPO_OUTPUT_ROOT", root)
        .output()
        .unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn malformed_config_exits_1_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[model]\nd_model = \"wide\"\n").unwrap();
    let out = cli(dir.path(), &["warmup", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(!dir.path().join("run").exists());
    assert!(fs::read_dir(dir.path()).unwrap().count() == 1);
}

#[test]
fn unknown_algorithm_lists_the_choices() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let out = cli(dir.path(), &["train", "--config", cfg.to_str().unwrap(), "--algorithm", "ppo"]);
    assert_eq!(out.status.code(), Some(1));
    let msg = stderr(&out);
    for name in ["latent_grpo", "soft_grpo", "explicit_grpo"] {
        assert!(msg.contains(name), "{msg}");
    }
}

#[test]
fn verify_gradients_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = cli(dir.path(), &["verify-gradients", "--trials", "30"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
    let report: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(report["passed"], true);

    let bad = cli(dir.path(), &["verify-gradients", "--trials", "30", "--inject-fault", "missing-flip"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("one_sided_component_score"), "{}", stderr(&bad));

    let zero = cli(dir.path(), &["verify-gradients", "--trials", "0"]);
    assert_eq!(zero.status.code(), Some(1));
}

#[test]
fn warmup_checkpoints_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for root in [a.path(), b.path()] {
        let cfg = write_config(root, &tiny());
        let out = cli(root, &["warmup", "--config", cfg.to_str().unwrap(), "--no-gate"]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    for name in ["warmup.json", "warmup_report.json", "warmup_corpus.jsonl"] {
        let x = fs::read(a.path().join("run").join(name)).unwrap();
        let y = fs::read(b.path().join("run").join(name)).unwrap();
        assert!(x == y, "{name} differs");
    }
}

#[test]
fn resumed_training_matches_an_uninterrupted_run_and_eval_repeats() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfgs = vec![];
    for root in [a.path(), b.path()] {
        let cfg = write_config(root, &tiny());
        let out = cli(root, &["warmup", "--config", cfg.to_str().unwrap(), "--no-gate"]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        cfgs.push(cfg);
    }
    let (ca, cb) = (cfgs[0].to_str().unwrap(), cfgs[1].to_str().unwrap());
    assert!(cli(a.path(), &["train", "--config", ca]).status.success());
    // interrupted after 4 steps (a checkpoint boundary), then resumed
    assert!(cli(b.path(), &["train", "--config", cb, "--max-steps", "4"]).status.success());
    let out = cli(b.path(), &["train", "--config", cb, "--resume"]);
    assert!(out.status.success(), "{}", stderr(&out));
    for name in ["metrics_latent_grpo.jsonl", "checkpoint_latent_grpo.json"] {
        let x = fs::read_to_string(a.path().join("run").join(name)).unwrap();
        let y = fs::read_to_string(b.path().join("run").join(name)).unwrap();
        assert_eq!(x, y, "{name} differs");
    }

    let ck = a.path().join("run").join("checkpoint_latent_grpo.json");
    let args = ["eval", "--config", ca, "--checkpoint", ck.to_str().unwrap(), "--mode", "sampled", "--k", "2", "--n", "4"];
    let first = cli(a.path(), &args);
    assert!(first.status.success(), "{}", stderr(&first));
    assert_eq!(first.stdout, cli(a.path(), &args).stdout);
    let report: serde_json::Value = serde_json::from_slice(&first.stdout).unwrap();
    assert!(report["pass_at_1"].as_f64().unwrap() <= report["pass_at_k_requested"].as_f64().unwrap());
}
