use std::path::Path;
use std::process::{Command, Output};

fn ovdet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovdet"))
        .args(args)
        .current_dir(cwd)
        .env("LOCOV_THREADS", "1")
        .output()
        .expect("binary runs")
}

const TINY: &str = r#"
seed = 3

[world]
known_classes = 4
novel_classes = 2
train_images = 60
val_images = 12
test_images = 12

[model]
embed_dim = 8
fusion_layers = 1
heads = 2
ffn_hidden = 8

[model.init]
embedding_std = 0.35

[lsm]
steps = 8
batch_size = 4

[stt]
steps = 6
batch_size = 4
eval_every = 3
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn full_pipeline_runs_and_files_appear() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, TINY);

    let o = ovdet(&["synth", "--config", &cfg, "--out", "world"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("world/manifest.json").exists());
    let stats: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(stats.get("images").is_some());

    let o = ovdet(
        &[
            "train-lsm",
            "--config",
            &cfg,
            "--dataset",
            "world",
            "--out",
            "lsm",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(d.join("lsm/lsm_metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 8);

    let o = ovdet(
        &[
            "train-stt",
            "--dataset",
            "world",
            "--checkpoint",
            "lsm/lsm.ckpt",
            "--out",
            "stt",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));

    let o = ovdet(
        &[
            "evaluate",
            "--dataset",
            "world",
            "--checkpoint",
            "stt/stt.ckpt",
            "--setup",
            "novel",
            "--out",
            "eval",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("eval/eval.json")).unwrap()).unwrap();
    assert!(report["novel"].is_object());
    assert!(report["known"].is_null());
    assert!(d.join("eval/detections_novel.jsonl").exists());
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, TINY);
    for out in ["a", "b"] {
        assert!(ovdet(&["synth", "--config", &cfg, "--out", out], d)
            .status
            .success());
    }
    let mut names: Vec<_> = std::fs::read_dir(d.join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    for n in names {
        assert_eq!(
            std::fs::read(d.join("a").join(&n)).unwrap(),
            std::fs::read(d.join("b").join(&n)).unwrap(),
            "{n:?}"
        );
    }
}

#[test]
fn invalid_config_exits_with_two_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "[model]\nembed_dim = 10\nheads = 4\n");
    let o = ovdet(&["synth", "--config", &cfg, "--out", "w"], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.heads"), "{}", stderr(&o));

    let cfg = write_config(d, "[world]\nnoise_sdt = 0.1\n");
    let o = ovdet(&["synth", "--config", &cfg, "--out", "w"], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("noise_sdt"), "{}", stderr(&o));
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, TINY);
    assert!(ovdet(&["synth", "--config", &cfg, "--out", "world"], d)
        .status
        .success());
    let o = Command::new(env!("CARGO_BIN_EXE_ovdet"))
        .args([
            "train-lsm",
            "--config",
            &cfg,
            "--dataset",
            "world",
            "--out",
            "lsm",
        ])
        .current_dir(d)
        .env("LOCOV_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn wrong_stage_and_missing_inputs_are_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, TINY);
    assert!(ovdet(&["synth", "--config", &cfg, "--out", "world"], d)
        .status
        .success());
    assert!(ovdet(
        &[
            "train-lsm",
            "--config",
            &cfg,
            "--dataset",
            "world",
            "--out",
            "lsm"
        ],
        d
    )
    .status
    .success());

    let o = ovdet(
        &[
            "evaluate",
            "--dataset",
            "world",
            "--checkpoint",
            "lsm/lsm.ckpt",
            "--out",
            "e",
        ],
        d,
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("wrong-stage-checkpoint"));

    let o = ovdet(
        &[
            "train-lsm",
            "--config",
            &cfg,
            "--dataset",
            "nowhere",
            "--out",
            "x",
        ],
        d,
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn seed_flag_changes_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, TINY);
    assert!(ovdet(&["synth", "--config", &cfg, "--out", "a"], d)
        .status
        .success());
    assert!(ovdet(
        &[
            "train-lsm",
            "--config",
            &cfg,
            "--dataset",
            "a",
            "--out",
            "l1"
        ],
        d
    )
    .status
    .success());
    assert!(ovdet(
        &[
            "train-lsm",
            "--config",
            &cfg,
            "--dataset",
            "a",
            "--out",
            "l2",
            "--seed",
            "9"
        ],
        d
    )
    .status
    .success());
    assert_ne!(
        std::fs::read(d.join("l1/lsm.ckpt")).unwrap(),
        std::fs::read(d.join("l2/lsm.ckpt")).unwrap()
    );
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = ovdet(&["gradcheck", "--instances", "2", "--out", "gc"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 6);
    assert_eq!(
        std::fs::read_to_string(d.join("gc/gradcheck.jsonl"))
            .unwrap()
            .lines()
            .count(),
        12
    );

    let o = ovdet(
        &[
            "gradcheck",
            "--instances",
            "2",
            "--term",
            "icm",
            "--corrupt",
            "icm",
        ],
        d,
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL icm"));

    let o = ovdet(&["gradcheck", "--instances", "0"], d);
    assert!(o.status.success());

    let o = ovdet(&["gradcheck", "--term", "nope"], d);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_flag_is_rejected_by_the_parser() {
    let dir = tempfile::tempdir().unwrap();
    let o = ovdet(&["synth", "--bogus"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}
