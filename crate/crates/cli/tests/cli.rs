use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conceptdet")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_pretrain_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = cli(&["gen-data", "--seed", "7", "--count", "4", "--out", arg(&data)]);
    assert!(o.status.success(), "{o:?}");
    assert!(data.join("index.jsonl").exists());

    let cfg = dir.path().join("train.toml");
    std::fs::write(&cfg, "steps = 50\nbatch_size = 2\n[model]\nqueries = 10\n").unwrap();
    let ckpt = dir.path().join("base.ckpt");
    let o = cli(&["pretrain", "--config", arg(&cfg), "--steps", "2", "--split", arg(&data), "--out", arg(&ckpt)]);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    assert!(out.contains("steps 2;"), "{out}");
    assert!(out.contains("check frozen-unchanged: ok"));

    let o = cli(&["eval", "--ckpt", arg(&ckpt), "--split", arg(&data), "--prompt-mode", "interactive"]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).lines().any(|l| l.starts_with("mean")));

    let vp = dir.path().join("vp.ckpt");
    let o = cli(&["train-visual-prompt", "--base", arg(&ckpt), "--steps", "1", "--split", arg(&data), "--out", arg(&vp)]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("cosine"));

    let o = cli(&["tune-prompt", "--base", arg(&ckpt), "--steps", "1", "--super-class", "2", "--scenes", "4"]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("M=2"));
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.ckpt");
    let o = cli(&["eval", "--ckpt", arg(&missing)]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "stpes = 3\n").unwrap();
    let o = cli(&["pretrain", "--config", arg(&cfg), "--out", arg(&dir.path().join("x.ckpt"))]);
    assert_eq!(o.status.code(), Some(2));

    std::fs::write(&cfg, "regime = \"tune-prompt\"\n").unwrap();
    let o = cli(&["pretrain", "--config", arg(&cfg), "--out", arg(&dir.path().join("x.ckpt"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("regime"));

    let o = cli(&["ablate", "--toggle", "nonsense"]);
    assert!(!o.status.success());
}

#[test]
fn grad_check_module() {
    let o = cli(&["grad-check", "--module", "tune-prompt"]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("TunePrompt objective"));
}
