use std::path::Path;
use std::process::{Command, Output};

fn ggp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ggp-train"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

const TINY: &str = "\
data.pretrain_pairs = 32
data.vqa_train = 16
data.vqa_val = 8
pretrain.epochs = 1
pretrain.batch = 16
finetune.epochs = 1
finetune.batch = 8
itc.queue_size = 16
";

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.cfg");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn default_config_lists_every_key() {
    let out = ggp(&["default-config"]);
    assert!(out.status.success());
    let s = text(&out.stdout);
    for key in [
        "seed",
        "pretrain.lr",
        "finetune.lr",
        "ggp.delta",
        "ggp.epsilon",
        "itc.queue_size",
        "model.width",
    ] {
        assert!(s.lines().any(|l| l.starts_with(&format!("{key} = "))), "missing {key}");
    }
}

#[test]
fn pretrain_then_finetune() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let pre = dir.path().join("pre");
    let out = ggp(&["pretrain", "--config", &cfg, "--out", pre.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(pre.join("pretrain.ckpt").exists() && pre.join("metrics.csv").exists());

    let ft = dir.path().join("ft");
    let out = ggp(&[
        "finetune",
        "--config",
        &cfg,
        "--checkpoint",
        pre.join("pretrain.ckpt").to_str().unwrap(),
        "--out",
        ft.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("val open"));
    assert!(ft.join("summary.json").exists() && ft.join("finetune.ckpt").exists());
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ggp.deltaa = 0.1\n");
    let out = ggp(&["pretrain", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("ggp.deltaa"), "{}", text(&out.stderr));

    let missing = dir.path().join("nope.ckpt");
    let out = ggp(&[
        "finetune",
        "--checkpoint",
        missing.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success());

    let cfg = write_config(dir.path(), TINY);
    let out = ggp(&[
        "ablation",
        "--config",
        &cfg,
        "--seeds",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("at least 3"));
}

#[test]
fn selftest_passes() {
    let out = ggp(&["selftest"]);
    let s = text(&out.stdout);
    assert!(out.status.success(), "{s}");
    assert_eq!(s.lines().filter(|l| l.starts_with("PASS")).count(), 5, "{s}");
}
