//! CLI-level integration tests: exit codes, config error reporting, the
//! print-defaults round trip and the output-root env var.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_djscc"))
}

fn tmp(tag: &str) -> PathBuf {
    std::env::temp_dir().join(format!("djscc-cli-{}-{tag}", std::process::id()))
}

#[test]
fn print_defaults_parses_back() {
    let out = bin().arg("print-defaults").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("[train]"));
    assert!(text.contains("snr_set_db = 1,4,7,10,13"));
    assert!(text.contains("rate = 1/16"));

    // feeding the defaults back through --config is accepted
    let dir = tmp("defaults");
    std::fs::create_dir_all(&dir).unwrap();
    let cfg_path = dir.join("exp.conf");
    std::fs::write(&cfg_path, &text).unwrap();
    let run = dir.join("run");
    let status = bin()
        .args([
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
            // shrink to a few seconds
            "--set",
            "train.epochs_stage1=1",
            "--set",
            "train.epochs_per_decoder=0",
            "--set",
            "model.image_h=16",
            "--set",
            "model.image_w=16",
            "--set",
            "model.widths=3,4",
            "--set",
            "data.train_images=8",
            "--set",
            "data.eval_images=4",
            "--set",
            "train.batch_size=8",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(run.join("manifest.txt").exists());
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn config_errors_exit_2_and_list_everything() {
    let dir = tmp("badcfg");
    std::fs::create_dir_all(&dir).unwrap();
    let cfg_path = dir.join("bad.conf");
    std::fs::write(&cfg_path, "[train]\nlr = banana\nchannel = laser\n").unwrap();
    let out = bin()
        .args(["train", "--config", cfg_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("lr"), "{err}");
    assert!(err.contains("channel"), "{err}");
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn io_errors_exit_4() {
    let out = bin()
        .args(["eval", "--run", "/nonexistent/run-dir"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn out_root_env_is_honored() {
    let root = tmp("root");
    std::fs::create_dir_all(&root).unwrap();
    let status = bin()
        .args([
            "train",
            "--schedule",
            "simultaneous",
            "--out",
            "nested/run",
            "--set",
            "train.epochs_simultaneous=1",
            "--set",
            "model.image_h=16",
            "--set",
            "model.image_w=16",
            "--set",
            "model.widths=3,4",
            "--set",
            "data.train_images=8",
            "--set",
            "data.eval_images=4",
            "--set",
            "train.batch_size=8",
            "--set",
            "report.decoders=conv",
        ])
        .env("DJSCC_OUT_ROOT", root.to_str().unwrap())
        .status()
        .unwrap();
    assert!(status.success());
    assert!(root.join("nested/run/manifest.txt").exists());
    let _ = std::fs::remove_dir_all(&root);
}
